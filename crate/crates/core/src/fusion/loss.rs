use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// `softplus(theta) = target` solved for theta.
pub fn theta_for_lambda(lambda: f64) -> f64 {
    lambda.exp_m1().ln()
}

/// Values of one evaluation of `L = L_w + lambda * L_w/o`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_with: f64,
    pub loss_without: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Whether `total` is bit-identical to its composition.
    pub fn is_consistent(&self) -> bool {
        self.total.to_bits() == (self.loss_with + self.lambda * self.loss_without).to_bits() && self.lambda >= 0.0
    }
}

/// Predictions split by camera coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    /// `[M_eval, T_out]`.
    pub with_cameras: Tensor,
    /// `[N - M_eval, T_out]`.
    pub without_cameras: Tensor,
    /// `[N, T_out]` in node order.
    pub combined: Tensor,
    pub camera_nodes: Vec<usize>,
}

impl PredictionBatch {
    pub fn from_combined(combined: Tensor, camera_nodes: &[usize]) -> Result<Self> {
        let s = combined.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Shape { op: "prediction split", lhs: s, rhs: vec![0, 0] });
        }
        let (n, t) = (s[0], s[1]);
        if camera_nodes.is_empty() {
            return Err(Error::InvalidData("at least one camera node is required".into()));
        }
        if let Some(c) = camera_nodes.iter().find(|&&c| c >= n) {
            return Err(Error::InvalidData(format!("camera node {c} out of range for {n} nodes")));
        }
        let free = free_nodes(n, camera_nodes);
        let pick = |nodes: &[usize]| {
            let data = nodes.iter().flat_map(|&j| combined.data()[j * t..(j + 1) * t].iter().copied()).collect();
            Tensor::from_parts(vec![nodes.len(), t], data)
        };
        Ok(PredictionBatch {
            with_cameras: pick(camera_nodes),
            without_cameras: pick(&free),
            camera_nodes: camera_nodes.to_vec(),
            combined,
        })
    }
}

/// Nodes not in `camera_nodes`, ascending.
pub fn free_nodes(n: usize, camera_nodes: &[usize]) -> Vec<usize> {
    (0..n).filter(|j| !camera_nodes.contains(j)).collect()
}

fn check_targets(what: &str, t: &Tensor) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        let s = t.shape();
        let cols = *s.last().unwrap_or(&1);
        let row = (i / cols) % s.get(s.len().wrapping_sub(2)).copied().unwrap_or(1);
        return Err(Error::InvalidData(format!(
            "non-finite {what} target at node row {row}, step {}",
            i % cols
        )));
    }
    Ok(())
}

/// The two-term loss on tape variables; returns the total and its values.
pub fn dynamic_loss_vars<'t>(
    tape: &'t Tape,
    pred_with: Var<'t>,
    pred_without: Var<'t>,
    y_veh: &Tensor,
    y_gct: &Tensor,
    theta: Var<'t>,
) -> Result<(Var<'t>, LossBreakdown)> {
    check_targets("vehicle", y_veh)?;
    check_targets("GCT", y_gct)?;
    let lw = pred_with.sub(tape.constant(y_veh.clone()))?.abs().mean();
    let lwo = if y_gct.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        pred_without.sub(tape.constant(y_gct.clone()))?.abs().mean()
    };
    let lambda = theta.softplus();
    let total = lw.add(lambda.mul(lwo)?)?;
    let b = LossBreakdown {
        loss_with: lw.item(),
        loss_without: lwo.item(),
        lambda: lambda.item(),
        total: total.item(),
    };
    Ok((total, b))
}

/// `L_w = MAE(Y_veh, Y_w)`, `L_w/o = MAE(Y_gct, Y_w/o)`, `L = L_w + softplus(theta) L_w/o`.
pub fn dynamic_loss(pred: &PredictionBatch, y_veh: &Tensor, y_gct: &Tensor, theta: f64) -> Result<LossBreakdown> {
    if pred.with_cameras.shape() != y_veh.shape() || pred.without_cameras.shape() != y_gct.shape() {
        return Err(Error::Shape {
            op: "dynamic loss",
            lhs: [pred.with_cameras.shape(), pred.without_cameras.shape()].concat(),
            rhs: [y_veh.shape(), y_gct.shape()].concat(),
        });
    }
    let tape = Tape::new();
    let (_, b) = dynamic_loss_vars(
        &tape,
        tape.constant(pred.with_cameras.clone()),
        tape.constant(pred.without_cameras.clone()),
        y_veh,
        y_gct,
        tape.constant(Tensor::scalar(theta)),
    )?;
    Ok(b)
}
