//! Training losses and the dice evaluation metric.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::tensor::{downsample_avg_values, Tape, Tensor, Var};

/// Scalar components of one composite loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub main_loss: f64,
    pub aux_loss: Option<f64>,
    pub aux_stage: Option<usize>,
    pub total: f64,
}

/// How the auxiliary term is attached to the main loss for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWiring {
    /// Encoder stage (1-based) supervised by the auxiliary head, if any.
    pub aux_stage: Option<usize>,
    pub aux_lambda: f64,
    /// Drop the main term from the differentiated total (zero it when there
    /// is no auxiliary term). Diagnostic only.
    pub detach_main: bool,
}

impl LossWiring {
    pub fn main_only() -> Self {
        Self {
            aux_stage: None,
            aux_lambda: 1.0,
            detach_main: false,
        }
    }

    pub fn with_aux(stage: usize, aux_lambda: f64) -> Self {
        Self {
            aux_stage: Some(stage),
            aux_lambda,
            detach_main: false,
        }
    }
}

/// Mean numerically-stable BCE of `logits` against soft targets in `[0, 1]`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = tape.bce_with_logits(z, targets)?;
    Ok(tape.value(l).item())
}

/// Main BCE against the full-resolution mask plus, when wired, `aux_lambda`
/// times the BCE of the scheduled auxiliary head against the mask
/// average-pooled to that head's resolution.
///
/// `stage_factors[k]` is the cumulative downsampling factor at stage `k + 1`.
pub fn composite_loss(
    tape: &mut Tape,
    main_logits: Var,
    aux_logits: &BTreeMap<usize, Var>,
    mask: &Tensor,
    stage_factors: &[usize],
    wiring: LossWiring,
) -> Result<(Var, LossBreakdown)> {
    let main = tape.bce_with_logits(main_logits, mask)?;
    let main_loss = tape.value(main).item();

    let Some(stage) = wiring.aux_stage else {
        let (total_var, total) = if wiring.detach_main {
            (tape.scale(main, 0.0)?, 0.0)
        } else {
            (main, main_loss)
        };
        return Ok((
            total_var,
            LossBreakdown {
                main_loss,
                aux_loss: None,
                aux_stage: None,
                total,
            },
        ));
    };
    let Some(&logits) = aux_logits.get(&stage) else {
        return invalid(format!("no auxiliary logits for scheduled stage {stage}"));
    };
    let Some(&factor) = stage.checked_sub(1).and_then(|i| stage_factors.get(i)) else {
        return invalid(format!("stage {stage} has no downsampling factor"));
    };
    let target = downsample_avg_values(mask, factor)?;
    let aux = tape.bce_with_logits(logits, &target)?;
    let aux_loss = tape.value(aux).item();
    let weighted = tape.scale(aux, wiring.aux_lambda)?;
    let total_var = if wiring.detach_main {
        weighted
    } else {
        tape.add(main, weighted)?
    };
    let total = tape.value(total_var).item();
    Ok((
        total_var,
        LossBreakdown {
            main_loss,
            aux_loss: Some(aux_loss),
            aux_stage: Some(stage),
            total,
        },
    ))
}

fn check_binary(name: &str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.values().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return invalid(format!("{name} mask holds non-binary value {v}"));
    }
    Ok(())
}

/// `2 |X ∩ Y| / (|X| + |Y|)` over binary masks; 1.0 when both are empty.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return invalid(format!(
            "dice: prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        ));
    }
    check_binary("predicted", pred)?;
    check_binary("ground-truth", truth)?;
    let (mut inter, mut sizes) = (0.0, 0.0);
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        inter += p * t;
        sizes += p + t;
    }
    if sizes == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / sizes)
}
