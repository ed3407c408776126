use crate::error::Result;
use crate::numerics::rng::SceneRng;
use crate::numerics::{Graph, HasParams, Linear, Param, TransformerBlock, Var};
use crate::Real;

/// Pre-norm transformer, mean pool, linear projection to the latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<TransformerBlock>,
    pub pool: Linear,
}

impl Encoder {
    pub fn new(name: &str, width: usize, layers: usize, heads: usize, ff: usize, latent: usize, rng: &mut SceneRng) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(&format!("{name}.block{i}"), width, heads, ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            pool: Linear::new(&format!("{name}.pool"), width, latent, 1.0, rng),
        })
    }

    /// `tokens: [n, width] -> z: [1, latent]`.
    pub fn lower(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let mut h = tokens;
        for b in &self.blocks {
            h = b.lower(g, h)?;
        }
        let n = g.value(h).rows();
        let width = g.value(h).row_len();
        let s = g.tape.sum_rows(h)?;
        let s = g.tape.reshape(s, vec![1, width])?;
        let mean = g.tape.scale(s, 1.0 / n as Real)?;
        self.pool.lower(g, mean)
    }
}

impl HasParams for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.pool.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.pool.params_mut());
        p
    }
}
