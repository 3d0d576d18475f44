//! Diagonal selective state-space machinery: input-dependent parameter
//! projection, zero-order-hold discretization, and the scan variants used by
//! the encoder stack and by the verification oracles.
//!
//! Conventions: `d_model` channels (D), `d_state` states per channel (N). The
//! continuous state matrix is diagonal per (channel, state), so every decay
//! product is elementwise. The empty product equals 1, and scans start from a
//! zero state.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, Mat};
use crate::{Error, Result};

/// Construction knobs for seeded projections.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionConfig {
    /// Multiplier on the continuous decay coefficients a[d][n] = -(n+1)*a_scale.
    pub a_scale: f64,
    /// Multiplier on the timescale projection weights.
    pub delta_scale: f64,
    /// Offset added to the timescale pre-activation.
    pub delta_bias: f64,
    /// Minimum decay magnitude; construction rejects a_scale below this.
    pub eps_a: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            a_scale: 1.0,
            delta_scale: 1.0,
            delta_bias: 0.0,
            eps_a: 1e-6,
        }
    }
}

/// Input-dependent parameter generator: fixed diagonal decay coefficients plus
/// linear maps producing B_t, C_t and the timescale pre-activation from each
/// token.
#[derive(Debug, Clone)]
pub struct SelectiveProjections {
    d_model: usize,
    d_state: usize,
    /// Continuous decay coefficients, strictly negative (D x N).
    a: Mat,
    /// Token -> state-width input map (N x D).
    w_b: Mat,
    /// Token -> state-width output map (N x D).
    w_c: Mat,
    /// Token -> per-channel timescale pre-activation (D x D).
    w_delta: Mat,
    bias_delta: Vec<f64>,
}

impl SelectiveProjections {
    /// Deterministic seeded construction. a[d][n] = -(n+1) * a_scale gives a
    /// strict per-state decay spread; the projection weights are uniform with
    /// a 1/sqrt(fan_in) scale.
    pub fn seeded(d_model: usize, d_state: usize, seed: u64, cfg: &ProjectionConfig) -> Result<Self> {
        if d_model == 0 || d_state == 0 {
            return Err(Error::RejectedInput("d_model and d_state must be positive"));
        }
        if cfg.a_scale < cfg.eps_a {
            return Err(Error::RejectedInput("a_scale below eps_a breaks strict decay"));
        }
        let mut rng = math::seeded_rng(seed);
        let s = libm::sqrt(3.0 / d_model as f64);
        let a = Mat::from_fn(d_model, d_state, |_, n| -((n + 1) as f64) * cfg.a_scale);
        let w_b = Mat::from_fn(d_state, d_model, |_, _| math::uniform_sym(&mut rng, s));
        let w_c = Mat::from_fn(d_state, d_model, |_, _| math::uniform_sym(&mut rng, s));
        let w_delta =
            Mat::from_fn(d_model, d_model, |_, _| math::uniform_sym(&mut rng, s) * cfg.delta_scale);
        let bias_delta = vec![cfg.delta_bias; d_model];
        Ok(SelectiveProjections {
            d_model,
            d_state,
            a,
            w_b,
            w_c,
            w_delta,
            bias_delta,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_state(&self) -> usize {
        self.d_state
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
}

/// Project one token into its selective parameters: b_t = W_b x, c_t = W_c x,
/// delta_t = softplus(W_delta x + bias) > 0.
pub fn project_selective(
    x: &[f64],
    proj: &SelectiveProjections,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if x.len() != proj.d_model {
        return Err(Error::dim("project_selective token", proj.d_model, x.len()));
    }
    let b_t = proj.w_b.mat_vec(x);
    let c_t = proj.w_c.mat_vec(x);
    let mut delta = proj.w_delta.mat_vec(x);
    for (d, bias) in delta.iter_mut().zip(&proj.bias_delta) {
        *d = math::softplus(*d + bias);
    }
    Ok((b_t, c_t, delta))
}

/// Per-position discretized parameters: the currency of every scan and of
/// merge compensation.
#[derive(Debug, Clone)]
pub struct DiscretizedStep {
    /// Discrete decay factors exp(delta * a), in (0,1) for a < 0 (D x N).
    pub a_bar: Mat,
    /// Discrete input gains (D x N).
    pub b_bar: Mat,
    /// Output weights (N).
    pub c: Vec<f64>,
    /// Positive timescales (D).
    pub delta: Vec<f64>,
}

/// Below this |delta * a| the input gain uses the series limit instead of the
/// explicit expm1 form; both branches agree to well under 1e-12 there.
pub const TAU_TAYLOR: f64 = 1e-4;

fn zoh_gain_factor(z: f64, a: f64, delta: f64, tau: f64) -> f64 {
    if z.abs() < tau {
        // delta * (1 + z/2 + z^2/6 + z^3/24 + z^4/120) = (e^z - 1)/a
        delta * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0))))
    } else {
        libm::expm1(z) / a
    }
}

/// Zero-order-hold discretization with a configurable series switch.
pub fn discretize_zoh_with_tau(
    a: &Mat,
    b_t: &[f64],
    delta_t: &[f64],
    tau: f64,
) -> Result<(Mat, Mat)> {
    let (d_model, d_state) = (a.rows(), a.cols());
    if b_t.len() != d_state {
        return Err(Error::dim("discretize_zoh b_t", d_state, b_t.len()));
    }
    if delta_t.len() != d_model {
        return Err(Error::dim("discretize_zoh delta_t", d_model, delta_t.len()));
    }
    let mut a_bar = Mat::zeros(d_model, d_state);
    let mut b_bar = Mat::zeros(d_model, d_state);
    for d in 0..d_model {
        let delta = delta_t[d];
        for n in 0..d_state {
            let z = delta * a[(d, n)];
            a_bar[(d, n)] = libm::exp(z);
            b_bar[(d, n)] = zoh_gain_factor(z, a[(d, n)], delta, tau) * b_t[n];
        }
    }
    Ok((a_bar, b_bar))
}

/// Zero-order-hold discretization: a_bar = exp(delta*a), b_bar =
/// (exp(delta*a)-1)/a * b. The a -> 0 limit is handled analytically.
pub fn discretize_zoh(a: &Mat, b_t: &[f64], delta_t: &[f64]) -> Result<(Mat, Mat)> {
    discretize_zoh_with_tau(a, b_t, delta_t, TAU_TAYLOR)
}

/// Convenience: project one token and discretize.
pub fn discretize_token(x: &[f64], proj: &SelectiveProjections) -> Result<DiscretizedStep> {
    let (b_t, c, delta) = project_selective(x, proj)?;
    let (a_bar, b_bar) = discretize_zoh(&proj.a, &b_t, &delta)?;
    Ok(DiscretizedStep {
        a_bar,
        b_bar,
        c,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    /// Position visit order for a sequence of the given length.
    fn order(&self, len: usize) -> impl Iterator<Item = usize> {
        let fwd = matches!(self, Direction::Forward);
        (0..len).map(move |i| if fwd { i } else { len - 1 - i })
    }
}

/// Hidden states and outputs over a sequence, stored in original index order.
#[derive(Debug, Clone)]
pub struct HiddenTrajectory {
    /// h_t per position (D x N each).
    pub states: Vec<Mat>,
    /// y_t per position (D each).
    pub outputs: Vec<Vec<f64>>,
    pub direction: Direction,
}

impl HiddenTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn check_scan_inputs(steps: &[DiscretizedStep], x: &[Vec<f64>]) -> Result<()> {
    if steps.len() != x.len() {
        return Err(Error::dim("scan steps vs tokens", x.len(), steps.len()));
    }
    Ok(())
}

fn output_of(c: &[f64], h: &Mat) -> Vec<f64> {
    let (d_model, d_state) = (h.rows(), h.cols());
    let mut y = vec![0.0; d_model];
    for d in 0..d_model {
        let row = h.row(d);
        let mut acc = 0.0;
        for n in 0..d_state {
            acc += c[n] * row[n];
        }
        y[d] = acc;
    }
    y
}

/// The linear recurrence h_t = a_bar_t ⊙ h_{t-1} + b_bar_t x_t, y_t = c_t h_t,
/// from a zero initial state. For the backward direction the sequence is
/// traversed in reverse and the trajectory is returned in original order.
pub fn scan_recurrent(
    steps: &[DiscretizedStep],
    x: &[Vec<f64>],
    direction: Direction,
) -> Result<HiddenTrajectory> {
    scan_recurrent_skipping(steps, x, direction, &[])
}

/// Same recurrence, but positions listed in `deleted` contribute no input
/// (their decay step still applies). This is the term-deletion semantics used
/// by removal-loss analysis; with an empty list it is the plain scan.
pub fn scan_recurrent_skipping(
    steps: &[DiscretizedStep],
    x: &[Vec<f64>],
    direction: Direction,
    deleted: &[usize],
) -> Result<HiddenTrajectory> {
    check_scan_inputs(steps, x)?;
    let len = x.len();
    let mut states: Vec<Mat> = vec![Mat::zeros(0, 0); len];
    let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); len];
    let mut h: Option<Mat> = None;
    for t in direction.order(len) {
        let step = &steps[t];
        let (d_model, d_state) = (step.a_bar.rows(), step.a_bar.cols());
        if x[t].len() != d_model {
            return Err(Error::dim("scan token width", d_model, x[t].len()));
        }
        let mut next = match h {
            Some(prev) => {
                let mut m = prev;
                m.hadamard_assign(&step.a_bar);
                m
            }
            None => Mat::zeros(d_model, d_state),
        };
        if !deleted.contains(&t) {
            for d in 0..d_model {
                let xv = x[t][d];
                for n in 0..d_state {
                    next[(d, n)] += step.b_bar[(d, n)] * xv;
                }
            }
        }
        outputs[t] = output_of(&step.c, &next);
        states[t] = next.clone();
        h = Some(next);
    }
    Ok(HiddenTrajectory {
        states,
        outputs,
        direction,
    })
}

/// Explicit O(L^2) closed form: h_t = sum_j (prod of in-between decays) b_bar_j x_j.
/// This is the oracle path, kept independent of the recurrence.
pub fn scan_closed_form(
    steps: &[DiscretizedStep],
    x: &[Vec<f64>],
    direction: Direction,
) -> Result<HiddenTrajectory> {
    check_scan_inputs(steps, x)?;
    let len = x.len();
    let mut states: Vec<Mat> = Vec::with_capacity(len);
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(len);
    for t in 0..len {
        let (d_model, d_state) = (steps[t].a_bar.rows(), steps[t].a_bar.cols());
        let mut h = Mat::zeros(d_model, d_state);
        let sources: Vec<usize> = match direction {
            Direction::Forward => (0..=t).collect(),
            Direction::Backward => (t..len).collect(),
        };
        for j in sources {
            let mut prod = Mat::ones(d_model, d_state);
            // Forward: decays at positions j+1..=t. Backward: decays at t..=j-1
            // (the decay applies at the destination side of each transition).
            let decay_positions: Vec<usize> = match direction {
                Direction::Forward => (j + 1..=t).collect(),
                Direction::Backward => (t..j).collect(),
            };
            for k in decay_positions {
                prod.hadamard_assign(&steps[k].a_bar);
            }
            for d in 0..d_model {
                let xv = x[j][d];
                for n in 0..d_state {
                    h[(d, n)] += prod[(d, n)] * steps[j].b_bar[(d, n)] * xv;
                }
            }
        }
        outputs.push(output_of(&steps[t].c, &h));
        states.push(h);
    }
    Ok(HiddenTrajectory {
        states,
        outputs,
        direction,
    })
}

/// Equivalent attention form of one direction's scan. `alpha` is the channel
/// mean; per-channel matrices are kept when requested (needed to reconstruct
/// outputs exactly).
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    /// Channel-mean scores (L x L).
    pub alpha: Mat,
    /// Optional per-channel stack (D entries of L x L).
    pub per_channel: Option<Vec<Mat>>,
    pub direction: Direction,
}

/// Attention reformulation: alpha[d][i][j] = c_i . (prod decays) b_bar_j[d],
/// lower-triangular for a forward scan and upper-triangular for backward.
pub fn hidden_attention(
    steps: &[DiscretizedStep],
    direction: Direction,
    keep_per_channel: bool,
) -> Result<AttentionMatrix> {
    let len = steps.len();
    if len == 0 {
        return Err(Error::RejectedInput("hidden_attention on empty sequence"));
    }
    let (d_model, d_state) = (steps[0].a_bar.rows(), steps[0].a_bar.cols());
    let mut per_channel = vec![Mat::zeros(len, len); d_model];
    for i in 0..len {
        // Running decay product from source j to observer i, extended as j
        // moves away from i.
        let mut prod = Mat::ones(d_model, d_state);
        let sources: Vec<usize> = match direction {
            Direction::Forward => (0..=i).rev().collect(),
            Direction::Backward => (i..len).collect(),
        };
        for j in sources {
            if j != i {
                // Transition decay entering from the next-closer position.
                let k = match direction {
                    Direction::Forward => j + 1,
                    Direction::Backward => j - 1,
                };
                prod.hadamard_assign(&steps[k].a_bar);
            }
            for d in 0..d_model {
                let mut acc = 0.0;
                for n in 0..d_state {
                    acc += steps[i].c[n] * prod[(d, n)] * steps[j].b_bar[(d, n)];
                }
                per_channel[d][(i, j)] = acc;
            }
        }
    }
    let mut alpha = Mat::zeros(len, len);
    for d in 0..d_model {
        alpha.add_assign(&per_channel[d]);
    }
    let alpha = alpha.scale(1.0 / d_model as f64);
    Ok(AttentionMatrix {
        alpha,
        per_channel: if keep_per_channel { Some(per_channel) } else { None },
        direction,
    })
}

/// Idealized reduced-sequence scan that preserves the decay product across
/// removed positions: h*_k = gap_products[k] ⊙ h*_{k-1} + b_bar_k x_k.
/// `gap_products[k]` is the decay applied when transitioning into retained
/// element k in the given direction (for k first in traversal order it
/// multiplies the zero initial state and is irrelevant). Used by exactness
/// oracles and loss analysis only, never by the production merged pass.
pub fn gap_aware_scan(
    steps: &[DiscretizedStep],
    x: &[Vec<f64>],
    gap_products: &[Mat],
    direction: Direction,
) -> Result<HiddenTrajectory> {
    check_scan_inputs(steps, x)?;
    if gap_products.len() != x.len() {
        return Err(Error::dim(
            "gap_aware_scan gap_products",
            x.len(),
            gap_products.len(),
        ));
    }
    let len = x.len();
    let mut states: Vec<Mat> = vec![Mat::zeros(0, 0); len];
    let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); len];
    let mut h: Option<Mat> = None;
    for t in direction.order(len) {
        let step = &steps[t];
        let (d_model, d_state) = (step.a_bar.rows(), step.a_bar.cols());
        let mut next = match h {
            Some(prev) => {
                let mut m = prev;
                m.hadamard_assign(&gap_products[t]);
                m
            }
            None => Mat::zeros(d_model, d_state),
        };
        for d in 0..d_model {
            let xv = x[t][d];
            for n in 0..d_state {
                next[(d, n)] += step.b_bar[(d, n)] * xv;
            }
        }
        outputs[t] = output_of(&step.c, &next);
        states[t] = next.clone();
        h = Some(next);
    }
    Ok(HiddenTrajectory {
        states,
        outputs,
        direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn toy_proj(d_model: usize, d_state: usize, seed: u64) -> SelectiveProjections {
        SelectiveProjections::seeded(d_model, d_state, seed, &ProjectionConfig::default()).unwrap()
    }

    fn toy_tokens(d_model: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = math::seeded_rng(seed);
        (0..len)
            .map(|_| (0..d_model).map(|_| math::gaussian(&mut rng)).collect())
            .collect()
    }

    fn steps_for(tokens: &[Vec<f64>], proj: &SelectiveProjections) -> Vec<DiscretizedStep> {
        tokens.iter().map(|t| discretize_token(t, proj).unwrap()).collect()
    }

    #[test]
    fn zero_token_projection() {
        let proj = toy_proj(4, 3, 7);
        let x = vec![0.0; 4];
        let (b, c, delta) = project_selective(&x, &proj).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));
        assert!(c.iter().all(|v| *v == 0.0));
        for d in delta {
            assert!((d - core::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_bias_shifts_delta() {
        let cfg = ProjectionConfig {
            delta_bias: 1.0,
            ..ProjectionConfig::default()
        };
        let proj = SelectiveProjections::seeded(4, 3, 7, &cfg).unwrap();
        let (_, _, delta) = project_selective(&[0.0; 4], &proj).unwrap();
        for d in delta {
            assert!((d - 1.3132616875182228).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_matches_naive_dot_products() {
        let proj = toy_proj(6, 5, 11);
        let x = toy_tokens(6, 1, 3).remove(0);
        let (b, c, delta) = project_selective(&x, &proj).unwrap();
        // Naive loop-based re-computation.
        for n in 0..5 {
            let mut acc_b = 0.0;
            let mut acc_c = 0.0;
            for d in 0..6 {
                acc_b += proj.w_b[(n, d)] * x[d];
                acc_c += proj.w_c[(n, d)] * x[d];
            }
            assert!((b[n] - acc_b).abs() < 1e-12);
            assert!((c[n] - acc_c).abs() < 1e-12);
        }
        for d in 0..6 {
            let mut acc = proj.bias_delta[d];
            for e in 0..6 {
                acc += proj.w_delta[(d, e)] * x[e];
            }
            assert!((delta[d] - math::softplus(acc)).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let proj = toy_proj(4, 3, 7);
        assert!(project_selective(&[0.0; 5], &proj).is_err());
    }

    #[test]
    fn zoh_zero_decay_limit() {
        // a = 0 is the Euler limit: a_bar = 1, b_bar = delta * b.
        let a = Mat::zeros(1, 1);
        let (a_bar, b_bar) = discretize_zoh(&a, &[1.0], &[0.3]).unwrap();
        assert_eq!(a_bar[(0, 0)], 1.0);
        assert!((b_bar[(0, 0)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zoh_direct_evaluation() {
        // a = -1, delta = ln 2: a_bar = 0.5, b_bar = (0.5 - 1)/(-1) = 0.5.
        let a = Mat::from_fn(1, 1, |_, _| -1.0);
        let (a_bar, b_bar) = discretize_zoh(&a, &[1.0], &[core::f64::consts::LN_2]).unwrap();
        assert!((a_bar[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((b_bar[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_decay_sweep_converges_to_euler() {
        let delta = 0.7;
        let mut last_gap = f64::INFINITY;
        let mut a_val = -1e-6;
        while a_val < -1e-12 {
            let a = Mat::from_fn(1, 1, |_, _| a_val);
            let (_, b_bar) = discretize_zoh(&a, &[1.0], &[delta]).unwrap();
            let gap = (b_bar[(0, 0)] - delta).abs();
            assert!(gap <= last_gap + 1e-18);
            last_gap = gap;
            a_val /= 10.0;
        }
        assert!(last_gap < 1e-12);
    }

    #[test]
    fn zoh_series_switch_is_continuous() {
        // Evaluate both branches just at the switch magnitude.
        let delta = 1.0;
        for sign in [-1.0, 1.0] {
            let z = sign * TAU_TAYLOR;
            let a = z / delta;
            let exact = libm::expm1(z) / a;
            let series = zoh_gain_factor(z, a, delta, f64::INFINITY);
            assert!((exact - series).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_single_position_is_injection() {
        let proj = toy_proj(3, 4, 5);
        let tokens = toy_tokens(3, 1, 9);
        let steps = steps_for(&tokens, &proj);
        let traj = scan_recurrent(&steps, &tokens, Direction::Forward).unwrap();
        for d in 0..3 {
            for n in 0..4 {
                let expect = steps[0].b_bar[(d, n)] * tokens[0][d];
                assert!((traj.states[0][(d, n)] - expect).abs() < 1e-15);
            }
        }
        let y = output_of(&steps[0].c, &traj.states[0]);
        assert_eq!(y, traj.outputs[0]);
    }

    #[test]
    fn scan_zero_tokens_zero_everything() {
        let proj = toy_proj(3, 4, 5);
        let tokens = vec![vec![0.0; 3]; 6];
        let steps = steps_for(&tokens, &proj);
        for dir in [Direction::Forward, Direction::Backward] {
            let traj = scan_recurrent(&steps, &tokens, dir).unwrap();
            for h in &traj.states {
                assert_eq!(h.max_abs(), 0.0);
            }
            for y in &traj.outputs {
                assert!(y.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn closed_form_two_step_unrolling() {
        let proj = toy_proj(2, 2, 13);
        let tokens = toy_tokens(2, 2, 4);
        let steps = steps_for(&tokens, &proj);
        let traj = scan_closed_form(&steps, &tokens, Direction::Forward).unwrap();
        for d in 0..2 {
            for n in 0..2 {
                let expect = steps[1].a_bar[(d, n)] * steps[0].b_bar[(d, n)] * tokens[0][d]
                    + steps[1].b_bar[(d, n)] * tokens[1][d];
                assert!((traj.states[1][(d, n)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closed_form_identity_decay_accumulates() {
        // With a_bar forced to 1 the state is a running sum of injections.
        let proj = toy_proj(2, 2, 13);
        let tokens = toy_tokens(2, 4, 8);
        let mut steps = steps_for(&tokens, &proj);
        for s in &mut steps {
            s.a_bar = Mat::ones(2, 2);
        }
        let traj = scan_closed_form(&steps, &tokens, Direction::Forward).unwrap();
        let mut acc = Mat::zeros(2, 2);
        for (t, tok) in tokens.iter().enumerate() {
            for d in 0..2 {
                for n in 0..2 {
                    acc[(d, n)] += steps[t].b_bar[(d, n)] * tok[d];
                }
            }
            assert!(traj.states[t].max_abs_diff(&acc) < 1e-14);
        }
    }

    #[test]
    fn recurrent_matches_closed_form_both_directions() {
        let proj = toy_proj(4, 8, 21);
        let tokens = toy_tokens(4, 32, 22);
        let steps = steps_for(&tokens, &proj);
        for dir in [Direction::Forward, Direction::Backward] {
            let a = scan_recurrent(&steps, &tokens, dir).unwrap();
            let b = scan_closed_form(&steps, &tokens, dir).unwrap();
            for t in 0..tokens.len() {
                assert!(a.states[t].max_abs_diff(&b.states[t]) < 1e-10);
                assert!(math::max_abs_diff_vec(&a.outputs[t], &b.outputs[t]) < 1e-10);
            }
        }
    }

    #[test]
    fn attention_diagonal_and_causality() {
        let proj = toy_proj(3, 4, 2);
        let tokens = toy_tokens(3, 6, 14);
        let steps = steps_for(&tokens, &proj);
        let att = hidden_attention(&steps, Direction::Forward, true).unwrap();
        let per = att.per_channel.as_ref().unwrap();
        for d in 0..3 {
            for i in 0..6 {
                // Empty product on the diagonal.
                let mut expect = 0.0;
                for n in 0..4 {
                    expect += steps[i].c[n] * steps[i].b_bar[(d, n)];
                }
                assert!((per[d][(i, i)] - expect).abs() < 1e-14);
                for j in i + 1..6 {
                    assert_eq!(per[d][(i, j)], 0.0);
                }
            }
        }
        let att_b = hidden_attention(&steps, Direction::Backward, true).unwrap();
        let per_b = att_b.per_channel.as_ref().unwrap();
        for d in 0..3 {
            for i in 0..6 {
                for j in 0..i {
                    assert_eq!(per_b[d][(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_reconstructs_recurrence_outputs() {
        let proj = toy_proj(4, 6, 31);
        let tokens = toy_tokens(4, 12, 32);
        let steps = steps_for(&tokens, &proj);
        for dir in [Direction::Forward, Direction::Backward] {
            let traj = scan_recurrent(&steps, &tokens, dir).unwrap();
            let att = hidden_attention(&steps, dir, true).unwrap();
            let per = att.per_channel.unwrap();
            for i in 0..tokens.len() {
                for d in 0..4 {
                    let mut y = 0.0;
                    for j in 0..tokens.len() {
                        y += per[d][(i, j)] * tokens[j][d];
                    }
                    assert!((y - traj.outputs[i][d]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn gap_scan_without_gaps_equals_recurrent() {
        let proj = toy_proj(3, 4, 17);
        let tokens = toy_tokens(3, 8, 18);
        let steps = steps_for(&tokens, &proj);
        let gap_products: Vec<Mat> = steps.iter().map(|s| s.a_bar.clone()).collect();
        let a = gap_aware_scan(&steps, &tokens, &gap_products, Direction::Forward).unwrap();
        let b = scan_recurrent(&steps, &tokens, Direction::Forward).unwrap();
        for t in 0..tokens.len() {
            assert!(a.states[t].max_abs_diff(&b.states[t]) < 1e-15);
        }
    }

    #[test]
    fn gap_scan_zero_decay_forgets_everything() {
        let proj = toy_proj(3, 4, 17);
        let tokens = toy_tokens(3, 4, 18);
        let steps = steps_for(&tokens, &proj);
        let mut gap_products: Vec<Mat> = steps.iter().map(|s| s.a_bar.clone()).collect();
        gap_products[2] = Mat::zeros(3, 4);
        let traj = gap_aware_scan(&steps, &tokens, &gap_products, Direction::Forward).unwrap();
        for d in 0..3 {
            for n in 0..4 {
                let expect = steps[2].b_bar[(d, n)] * tokens[2][d];
                assert!((traj.states[2][(d, n)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_scan_ignores_future_perturbations_bitwise() {
        let proj = toy_proj(3, 4, 40);
        let tokens = toy_tokens(3, 10, 41);
        let steps = steps_for(&tokens, &proj);
        let base = scan_recurrent(&steps, &tokens, Direction::Forward).unwrap();
        let mut perturbed = tokens.clone();
        perturbed[7][1] += 3.5;
        let steps_p = steps_for(&perturbed, &proj);
        let traj_p = scan_recurrent(&steps_p, &perturbed, Direction::Forward).unwrap();
        for t in 0..7 {
            assert_eq!(base.states[t], traj_p.states[t]);
            assert_eq!(base.outputs[t], traj_p.outputs[t]);
        }
        assert!(base.states[7].max_abs_diff(&traj_p.states[7]) > 0.0);
    }

    #[test]
    fn swapping_distinct_tokens_changes_states() {
        let proj = toy_proj(3, 4, 50);
        let tokens = toy_tokens(3, 8, 51);
        let (s, t) = (2, 5);
        assert_ne!(tokens[s], tokens[t]);
        let mut swapped = tokens.clone();
        swapped.swap(s, t);
        let steps = steps_for(&tokens, &proj);
        let steps_s = steps_for(&swapped, &proj);
        let a = scan_recurrent(&steps, &tokens, Direction::Forward).unwrap();
        let b = scan_recurrent(&steps_s, &swapped, Direction::Forward).unwrap();
        let changed = (s..8).any(|u| a.states[u].max_abs_diff(&b.states[u]) > 0.0);
        assert!(changed);
    }
}
