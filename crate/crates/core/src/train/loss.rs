use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Additive smoothing of the soft-Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Mean pixel cross-entropy plus soft Dice, both with weight 1.
pub fn loss(g: &mut Graph, logits: Var, mask: &[u8]) -> Result<Var> {
    let ce = g.cross_entropy(logits, mask)?;
    let dice = g.soft_dice(logits, mask, DICE_SMOOTH)?;
    g.add(ce, dice)
}

/// [`loss`] evaluated on plain values.
pub fn loss_value(logits: &Tensor, mask: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.detached());
    let l = loss(&mut g, z, mask)?;
    Ok(g.data(l)[0])
}
