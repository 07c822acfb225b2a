//! Composite training objective: binary cross-entropy, soft IoU, and a
//! boundary F-measure loss, summed per map and combined across the four
//! supervised maps with geometric deep-supervision weights.
//!
//! Every denominator and log argument is guarded with `EPS`. The IoU and
//! boundary losses add the guard to both numerator and denominator, so a
//! perfect prediction yields exactly zero loss instead of an epsilon
//! residue. IoU and boundary losses reduce per sample and average over the
//! batch; BCE averages over all pixels directly (identical when samples
//! share a size, which batches always do).

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::config::LossTerm;
use crate::error::{config_err, shape_err, Error, Result};
use crate::tape::{Tape, Var};

/// Guard for logs and ratio denominators.
pub const EPS: f64 = 1e-7;

/// Deep-supervision weight for the map at `level`: 1, 1/2, 1/4, 1/8 for
/// levels 2..5.
pub fn level_weight(level: u8) -> f64 {
    1.0 / f64::powi(2.0, level as i32 - 2)
}

fn check_pair(tape: &Tape, p: Var, g: Var) -> Result<()> {
    let (sp, sg) = (tape.shape(p), tape.shape(g));
    if sp != sg {
        return Err(shape_err(format!(
            "prediction shape {sp:?} != ground-truth shape {sg:?}"
        )));
    }
    Ok(())
}

fn check_binary(tape: &Tape, g: Var) -> Result<()> {
    let vg = tape.value(g);
    if vg.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(
            "ground-truth mask must be exactly binary".into(),
        ));
    }
    Ok(())
}

/// Mean over every pixel of `-[G ln P + (1-G) ln(1-P)]` with `P` clamped to
/// `[EPS, 1-EPS]`.
pub fn bce_loss(tape: &Tape, p: Var, g: Var) -> Result<Var> {
    check_pair(tape, p, g)?;
    check_binary(tape, g)?;
    let pc = tape.clamp(p, EPS, 1.0 - EPS);
    let pos = tape.mul(g, tape.ln(pc))?;
    let neg = tape.mul(tape.one_minus(g), tape.ln(tape.one_minus(pc)))?;
    Ok(tape.scale(tape.mean_all(tape.add(pos, neg)?), -1.0))
}

/// Soft IoU loss `1 - (sum GP + eps) / (sum (G + P - GP) + eps)`, per sample,
/// averaged over the batch. Exactly zero when `P == G`; zero for an all-empty
/// pair by the shared guard.
pub fn iou_loss(tape: &Tape, p: Var, g: Var) -> Result<Var> {
    check_pair(tape, p, g)?;
    check_binary(tape, g)?;
    let gp = tape.mul(g, p)?;
    let inter = tape.sum_spatial(gp);
    let union = tape.sum_spatial(tape.sub(tape.add(g, p)?, gp)?);
    let ratio = tape.mul(
        tape.add_scalar(inter, EPS),
        tape.recip(tape.add_scalar(union, EPS)),
    )?;
    Ok(tape.mean_all(tape.one_minus(ratio)))
}

/// Morphological boundary of a map in `[0,1]`:
/// `maxpool(1 - M, kernel, stride 1) - (1 - M)`. Zero on constant maps; for a
/// binary mask this lights the inner ring of the foreground.
pub fn extract_boundary(tape: &Tape, m: Var, kernel: usize) -> Result<Var> {
    if kernel % 2 == 0 || kernel < 3 {
        return Err(config_err(format!(
            "boundary kernel must be odd and >= 3, got {kernel}"
        )));
    }
    let inv = tape.one_minus(m);
    tape.sub(tape.maxpool_same(inv, kernel)?, inv)
}

/// F-measure loss on the extracted boundaries: with boundary precision
/// `p = (sum GbPb + eps)/(sum Pb + eps)` and recall
/// `r = (sum GbPb + eps)/(sum Gb + eps)`, returns `1 - 2pr/(p + r)` per
/// sample, averaged over the batch. Identical boundaries (including the
/// both-empty case) give exactly zero.
pub fn boundary_loss(tape: &Tape, p: Var, g: Var, kernel: usize) -> Result<Var> {
    check_pair(tape, p, g)?;
    check_binary(tape, g)?;
    let pb = extract_boundary(tape, p, kernel)?;
    let gb = extract_boundary(tape, g, kernel)?;
    let inter = tape.add_scalar(tape.sum_spatial(tape.mul(pb, gb)?), EPS);
    let sum_p = tape.add_scalar(tape.sum_spatial(pb), EPS);
    let sum_g = tape.add_scalar(tape.sum_spatial(gb), EPS);
    let prec = tape.mul(inter, tape.recip(sum_p))?;
    let rec = tape.mul(inter, tape.recip(sum_g))?;
    let f = tape.mul(
        tape.scale(tape.mul(prec, rec)?, 2.0),
        tape.recip(tape.add(prec, rec)?),
    )?;
    Ok(tape.mean_all(tape.one_minus(f)))
}

/// Loss values of one supervised map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelLoss {
    pub level: u8,
    pub weight: f64,
    pub bce: Option<f64>,
    pub iou: Option<f64>,
    pub bd: Option<f64>,
    pub sum: f64,
}

/// Per-level terms plus the deep-supervision weighted total.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_level: Vec<LevelLoss>,
    pub total: f64,
}

/// Sum the enabled terms for every supervised map and weight them
/// `1/2^(level-2)`. Returns the total as a tape node (for backward) plus the
/// detached numeric breakdown.
pub fn total_loss(
    tape: &Tape,
    maps: &[(u8, Var)],
    g: Var,
    terms: &[LossTerm],
    boundary_kernel: usize,
) -> Result<(Var, LossBreakdown)> {
    if maps.is_empty() {
        return Err(shape_err("total_loss: no supervised maps"));
    }
    if terms.is_empty() {
        return Err(config_err("total_loss: no loss terms enabled"));
    }
    let mut per_level = Vec::with_capacity(maps.len());
    let mut total: Option<Var> = None;
    for &(level, p) in maps {
        let mut parts: Vec<Var> = Vec::new();
        let mut bce_v = None;
        let mut iou_v = None;
        let mut bd_v = None;
        for term in terms {
            let v = match term {
                LossTerm::Bce => {
                    let v = bce_loss(tape, p, g)?;
                    bce_v = Some(tape.scalar(v));
                    v
                }
                LossTerm::Iou => {
                    let v = iou_loss(tape, p, g)?;
                    iou_v = Some(tape.scalar(v));
                    v
                }
                LossTerm::Bd => {
                    let v = boundary_loss(tape, p, g, boundary_kernel)?;
                    bd_v = Some(tape.scalar(v));
                    v
                }
            };
            parts.push(v);
        }
        let mut level_sum = parts[0];
        for &v in &parts[1..] {
            level_sum = tape.add(level_sum, v)?;
        }
        let weight = level_weight(level);
        per_level.push(LevelLoss {
            level,
            weight,
            bce: bce_v,
            iou: iou_v,
            bd: bd_v,
            sum: tape.scalar(level_sum),
        });
        let weighted = tape.scale(level_sum, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("at least one map");
    Ok((
        total,
        LossBreakdown {
            per_level,
            total: tape.scalar(total),
        },
    ))
}

// ---------------------------------------------------------------------------
// Array-level conveniences (tests, logging)
// ---------------------------------------------------------------------------

fn run_scalar(
    p: &Array4<f64>,
    g: &Array4<f64>,
    f: impl Fn(&Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let gv = tape.leaf(g.clone());
    Ok(tape.scalar(f(&tape, pv, gv)?))
}

pub fn bce_loss_value(p: &Array4<f64>, g: &Array4<f64>) -> Result<f64> {
    run_scalar(p, g, bce_loss)
}

pub fn iou_loss_value(p: &Array4<f64>, g: &Array4<f64>) -> Result<f64> {
    run_scalar(p, g, iou_loss)
}

pub fn boundary_loss_value(p: &Array4<f64>, g: &Array4<f64>, kernel: usize) -> Result<f64> {
    run_scalar(p, g, |t, pv, gv| boundary_loss(t, pv, gv, kernel))
}

pub fn extract_boundary_array(m: &Array4<f64>, kernel: usize) -> Result<Array4<f64>> {
    let tape = Tape::new();
    let mv = tape.leaf(m.clone());
    let b = extract_boundary(&tape, mv, kernel)?;
    Ok((*tape.value(b)).clone())
}
