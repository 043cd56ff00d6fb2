//! Finite-difference oracle shared by the gradient-check suites.
//!
//! The oracle is independent of the reverse-mode path it verifies: it only
//! ever calls the forward pass, re-registering parameters as plain inputs.
//! Draws whose forward pass runs within `KINK_MARGIN` of a non-differentiable
//! point (relu kink, min/max selection boundary, top-k boundary) are
//! rejected, because a central difference of width `FD_H` straddling a kink
//! measures a subgradient mixture rather than the one-sided derivative the
//! tape reports. Structural zeros and exact ties are excluded from the
//! margin by the tape itself; they stay put under perturbation.

use graphdiag_core::tensor::{Tape, Tensor, TensorError, TensorId};

pub const FD_H: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 2e-3;

/// |ad - fd| <= tol * max(floor, |ad|, |fd|); the floor turns the relative
/// criterion into a tight absolute one for vanishing gradients.
pub fn assert_grad_close(ad: f64, fd: f64, tol: f64, ctx: &str) {
    let denom = ad.abs().max(fd.abs()).max(1e-3);
    assert!(
        (ad - fd).abs() <= tol * denom,
        "{ctx}: ad {ad:.9e} vs fd {fd:.9e} (rel {:.3e} > {tol:e})",
        (ad - fd).abs() / denom
    );
}

/// Checks the tape gradient of `build_loss` against central differences for
/// every entry of every parameter. Returns false when the draw was rejected
/// for sitting too close to a kink.
pub fn check_gradients<F>(params: &mut [Tensor], build_loss: F, tol: f64, ctx: &str) -> bool
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect();
    let loss_id = build_loss(&mut tape, &ids).unwrap_or_else(|e| panic!("{ctx}: {e}"));
    assert_eq!(tape.value(loss_id).len(), 1, "{ctx}: loss must be scalar");
    tape.backward(loss_id).unwrap_or_else(|e| panic!("{ctx}: {e}"));
    if tape.kink_margin() < KINK_MARGIN {
        return false;
    }
    let ad: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |params: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.input_tensor(p)).collect();
        let loss = build_loss(&mut tape, &ids).unwrap_or_else(|e| panic!("{ctx}: {e}"));
        tape.value(loss)[0]
    };

    for pi in 0..params.len() {
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            params[pi].data_mut()[k] = orig + FD_H;
            let f_plus = eval(params);
            params[pi].data_mut()[k] = orig - FD_H;
            let f_minus = eval(params);
            params[pi].data_mut()[k] = orig;
            let fd = (f_plus - f_minus) / (2.0 * FD_H);
            assert_grad_close(ad[pi][k], fd, tol, &format!("{ctx} param {pi}[{k}]"));
        }
    }
    true
}

/// Runs `one_seed` until it has accepted `required` draws, panicking if the
/// seed budget runs out first.
pub fn run_seeds(required: usize, budget: u64, ctx: &str, mut one_seed: impl FnMut(u64) -> bool) {
    let mut checked = 0;
    for seed in 0..budget {
        if one_seed(seed) {
            checked += 1;
            if checked == required {
                return;
            }
        }
    }
    panic!("{ctx}: only {checked}/{required} draws accepted within {budget} seeds");
}
