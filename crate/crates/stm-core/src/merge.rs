//! Nearest-neighbor token merging with hidden-state compensation, plus the
//! similarity-pair (ToMe-style) baseline and merge scheduling.
//!
//! Reduced tokens are always the outermost positions on each side of the class
//! token; each one is folded into its nearest remaining neighbor toward the
//! class token. The compensation scales every folded token by the decay
//! product from its position to the merge target and by the ratio of input
//! gains, then collapses the state dimension with a per-channel least-squares
//! solve.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::Mat;
use crate::ssm::{discretize_token, Direction};
use crate::vim::{LayerCache, TokenSequence, VimLayerParams};
use crate::{Error, Result};

/// Retained positions of one merge event over a pre-merge sequence, with gap
/// counts. Gaps include the leading and trailing runs (virtual boundary
/// endpoints), so retained + gaps always sums to the pre-merge length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedIndexSet {
    q: Vec<usize>,
    r: Vec<usize>,
    pre_len: usize,
}

impl RetainedIndexSet {
    pub fn new(q: Vec<usize>, pre_len: usize) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::RejectedInput("retained set must be nonempty"));
        }
        if !q.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::RejectedInput("retained positions must strictly increase"));
        }
        if *q.last().unwrap() >= pre_len {
            return Err(Error::RejectedInput("retained position out of range"));
        }
        let mut r = Vec::with_capacity(q.len() + 1);
        r.push(q[0]);
        for w in q.windows(2) {
            r.push(w[1] - w[0] - 1);
        }
        r.push(pre_len - 1 - q.last().unwrap());
        debug_assert_eq!(r.iter().sum::<usize>() + q.len(), pre_len);
        Ok(RetainedIndexSet { q, r, pre_len })
    }

    pub fn from_removed(pre_len: usize, removed: &[usize]) -> Result<Self> {
        let q: Vec<usize> = (0..pre_len).filter(|p| !removed.contains(p)).collect();
        RetainedIndexSet::new(q, pre_len)
    }

    pub fn q(&self) -> &[usize] {
        &self.q
    }

    /// Gap counts; index 0 is the run before the first retained position,
    /// index K the run after the last one.
    pub fn gaps(&self) -> &[usize] {
        &self.r
    }

    pub fn pre_len(&self) -> usize {
        self.pre_len
    }

    pub fn retained_count(&self) -> usize {
        self.q.len()
    }

    pub fn covers(&self, pos: usize) -> bool {
        self.q.binary_search(&pos).is_ok()
    }

    /// Inclusive bounds of the gap merged forward into q[k]:
    /// positions gap_start ..= q[k]-1, empty when nothing was reduced there.
    pub fn fwd_gap(&self, k: usize) -> (usize, usize) {
        let start = if k == 0 { 0 } else { self.q[k - 1] + 1 };
        (start, self.q[k])
    }

    /// Inclusive bounds of the gap merged backward into q[k]:
    /// positions q[k]+1 ..= gap_end.
    pub fn bwd_gap(&self, k: usize) -> (usize, usize) {
        let end = if k + 1 == self.q.len() {
            self.pre_len - 1
        } else {
            self.q[k + 1] - 1
        };
        (self.q[k], end)
    }
}

/// Elementwise decay products over each gap, as consumed by the gap-aware
/// scan: entry k is the product of `a_bar` over the positions traversed when
/// transitioning into retained element k in the given direction (including the
/// destination position itself).
pub fn gap_decay_products(
    a_bar_full: &[Mat],
    retained: &RetainedIndexSet,
    direction: Direction,
) -> Result<Vec<Mat>> {
    if a_bar_full.len() != retained.pre_len() {
        return Err(Error::dim(
            "gap_decay_products a_bar",
            retained.pre_len(),
            a_bar_full.len(),
        ));
    }
    let q = retained.q();
    let mut out = Vec::with_capacity(q.len());
    for (k, &qk) in q.iter().enumerate() {
        let (lo, hi) = match direction {
            // Transition from q[k-1] to q[k]: decays at q[k-1]+1 ..= q[k].
            Direction::Forward => {
                let lo = if k == 0 { 0 } else { q[k - 1] + 1 };
                (lo, qk)
            }
            // Transition from q[k+1] down to q[k]: decays at q[k] ..= q[k+1]-1.
            Direction::Backward => {
                let hi = if k + 1 == q.len() {
                    retained.pre_len() - 1
                } else {
                    q[k + 1] - 1
                };
                (qk, hi)
            }
        };
        let mut prod = Mat::ones(a_bar_full[qk].rows(), a_bar_full[qk].cols());
        for p in lo..=hi {
            prod.hadamard_assign(&a_bar_full[p]);
        }
        out.push(prod);
    }
    Ok(out)
}

/// How the (channel x state)-shaped compensation collapses to a token value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollapseRule {
    /// Per-channel least-squares against the target's input-gain row.
    LeastSquares,
    /// Per-channel mean of the per-state ratios (comparison mode).
    MeanRatio,
}

/// Which parameters feed merge compensation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSource {
    /// Discretized parameters cached at the previous layer (the production
    /// choice; reduced tokens never reach the current layer's projections).
    PreviousLayerCache,
    /// Projections of the current pre-merge sequence (oracle/exactness mode,
    /// and the fallback when no cache exists yet).
    CurrentProjection,
}

#[derive(Debug, Clone, Copy)]
pub struct MergeOptions {
    pub collapse: CollapseRule,
    /// Regularizer added to the squared-gain denominator of the solve.
    pub eps_div: f64,
    /// Use the current layer's gain at the merge target for the denominator
    /// instead of the cached one (alternative reading; off by default).
    pub target_gain_from_current: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            collapse: CollapseRule::LeastSquares,
            eps_div: 1e-12,
            target_gain_from_current: false,
        }
    }
}

/// Result of merging one gap into its target token.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub token: Vec<f64>,
    /// Per reduced position (ascending), the decay-times-gain weight matrix
    /// applied to that token before the collapse.
    pub weights: Vec<Mat>,
    /// Frobenius norm of the token-space solve residual.
    pub residual: f64,
    /// Channels whose gain row at the target was all zero (fell back to the
    /// unmodified token value).
    pub degenerate_channels: usize,
}

fn collapse_compensation(
    x_target: &[f64],
    t_mat: &Mat,
    gain: &Mat,
    opts: &MergeOptions,
) -> (Vec<f64>, f64, usize) {
    let (d_model, d_state) = (t_mat.rows(), t_mat.cols());
    let mut token = Vec::with_capacity(d_model);
    let mut degenerate = 0;
    for d in 0..d_model {
        let g = gain.row(d);
        let t = t_mat.row(d);
        let den: f64 = g.iter().map(|v| v * v).sum();
        let val = if den == 0.0 {
            degenerate += 1;
            x_target[d]
        } else {
            match opts.collapse {
                CollapseRule::LeastSquares => {
                    let num: f64 = g.iter().zip(t).map(|(gv, tv)| gv * tv).sum();
                    x_target[d] + num / (den + opts.eps_div)
                }
                CollapseRule::MeanRatio => {
                    let mut acc = 0.0;
                    let mut used = 0usize;
                    for n in 0..d_state {
                        if g[n].abs() > opts.eps_div {
                            acc += t[n] / g[n];
                            used += 1;
                        }
                    }
                    if used == 0 {
                        degenerate += 1;
                        x_target[d]
                    } else {
                        x_target[d] + acc / used as f64
                    }
                }
            }
        };
        token.push(val);
    }
    let mut res_sq = 0.0;
    for d in 0..d_model {
        let dx = token[d] - x_target[d];
        for n in 0..d_state {
            let r = gain[(d, n)] * dx - t_mat[(d, n)];
            res_sq += r * r;
        }
    }
    (token, libm::sqrt(res_sq), degenerate)
}

fn merge_gap(
    tokens: &[Vec<f64>],
    positions: core::ops::RangeInclusive<usize>,
    target: usize,
    a_bar: &[Mat],
    b_bar: &[Mat],
    base: usize,
    toward_target_desc: bool,
    target_gain: Option<&Mat>,
    opts: &MergeOptions,
) -> Result<MergeOutcome> {
    let (lo, hi) = (*positions.start(), *positions.end());
    let span = hi - lo + 1;
    if a_bar.len() != span || b_bar.len() != span {
        return Err(Error::dim("merge gap parameter span", span, a_bar.len()));
    }
    let reduced: Vec<usize> = positions.filter(|p| *p != target).collect();
    if reduced.is_empty() {
        return Ok(MergeOutcome {
            token: tokens[target].clone(),
            weights: Vec::new(),
            residual: 0.0,
            degenerate_channels: 0,
        });
    }
    let (d_model, d_state) = (a_bar[0].rows(), a_bar[0].cols());
    let mut t_mat = Mat::zeros(d_model, d_state);
    let mut weights = vec![Mat::zeros(0, 0); reduced.len()];
    // Running decay product extended away from the target; starts at the
    // target's own decay (the nearest reduced token crosses exactly it).
    let mut prod = a_bar[target - base].clone();
    let order: Vec<usize> = if toward_target_desc {
        (0..reduced.len()).rev().collect()
    } else {
        (0..reduced.len()).collect()
    };
    for (step, idx) in order.iter().enumerate() {
        let pos = reduced[*idx];
        if step > 0 {
            let prev_pos = reduced[order[step - 1]];
            prod.hadamard_assign(&a_bar[prev_pos - base]);
        }
        let mut w = prod.clone();
        w.hadamard_assign(&b_bar[pos - base]);
        for d in 0..d_model {
            let xv = tokens[pos][d];
            for n in 0..d_state {
                t_mat[(d, n)] += w[(d, n)] * xv;
            }
        }
        weights[*idx] = w;
    }
    let gain = target_gain.unwrap_or(&b_bar[target - base]);
    let (token, residual, degenerate) =
        collapse_compensation(&tokens[target], &t_mat, gain, opts);
    Ok(MergeOutcome {
        token,
        weights,
        residual,
        degenerate_channels: degenerate,
    })
}

/// Forward merge into retained position q[k]: every reduced token in the gap
/// before it is folded in, weighted by the decay product over the absolute
/// positions from just after the token through the target, times its input
/// gain. `a_bar`/`b_bar` must cover the gap positions through the target
/// (ascending, length gap+1).
pub fn merge_fwd(
    tokens: &[Vec<f64>],
    retained: &RetainedIndexSet,
    k: usize,
    a_bar: &[Mat],
    b_bar: &[Mat],
    opts: &MergeOptions,
) -> Result<MergeOutcome> {
    merge_fwd_with_gain(tokens, retained, k, a_bar, b_bar, None, opts)
}

pub fn merge_fwd_with_gain(
    tokens: &[Vec<f64>],
    retained: &RetainedIndexSet,
    k: usize,
    a_bar: &[Mat],
    b_bar: &[Mat],
    target_gain: Option<&Mat>,
    opts: &MergeOptions,
) -> Result<MergeOutcome> {
    let (start, target) = retained.fwd_gap(k);
    merge_gap(
        tokens,
        start..=target,
        target,
        a_bar,
        b_bar,
        start,
        true,
        target_gain,
        opts,
    )
}

/// Backward-direction mirror of [`merge_fwd`]: the gap after q[k] folds into
/// it, with decay products running from the target up to just before each
/// reduced token, taken from backward-direction parameters.
pub fn merge_bwd(
    tokens: &[Vec<f64>],
    retained: &RetainedIndexSet,
    k: usize,
    a_bar: &[Mat],
    b_bar: &[Mat],
    opts: &MergeOptions,
) -> Result<MergeOutcome> {
    merge_bwd_with_gain(tokens, retained, k, a_bar, b_bar, None, opts)
}

pub fn merge_bwd_with_gain(
    tokens: &[Vec<f64>],
    retained: &RetainedIndexSet,
    k: usize,
    a_bar: &[Mat],
    b_bar: &[Mat],
    target_gain: Option<&Mat>,
    opts: &MergeOptions,
) -> Result<MergeOutcome> {
    let (target, end) = retained.bwd_gap(k);
    merge_gap(
        tokens,
        target..=end,
        target,
        a_bar,
        b_bar,
        target,
        false,
        target_gain,
        opts,
    )
}

/// Which sides of the class token are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideMode {
    /// Pre-class side only.
    OneSide,
    /// Both sides symmetrically.
    BothSides,
}

/// Per-layer reduction counts, per direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerReduction {
    pub left: usize,
    pub right: usize,
}

impl LayerReduction {
    pub fn total(&self) -> usize {
        self.left + self.right
    }
}

/// A full reduction schedule: positional, input-independent, never touching
/// the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub layers: Vec<LayerReduction>,
    pub mode: SideMode,
    pub param_source: ParamSource,
    pub options: MergeOptions,
}

impl PartialEq for MergeOptions {
    fn eq(&self, other: &Self) -> bool {
        self.collapse == other.collapse
            && self.eps_div == other.eps_div
            && self.target_gain_from_current == other.target_gain_from_current
    }
}

impl MergePlan {
    pub fn empty(depth: usize) -> Self {
        MergePlan {
            layers: vec![LayerReduction::default(); depth],
            mode: SideMode::BothSides,
            param_source: ParamSource::PreviousLayerCache,
            options: MergeOptions::default(),
        }
    }

    pub fn total_reduction(&self) -> usize {
        self.layers.iter().map(|l| l.total()).sum()
    }

    pub fn layer(&self, idx: usize) -> LayerReduction {
        self.layers.get(idx).copied().unwrap_or_default()
    }
}

fn spread(total: usize, slots: usize) -> Vec<usize> {
    if slots == 0 {
        return Vec::new();
    }
    let base = total / slots;
    let extra = total % slots;
    (0..slots).map(|i| base + usize::from(i < extra)).collect()
}

/// Distribute per-layer, per-direction reduction counts as evenly as possible
/// so the final retained count is about l0 * (1 - target_rate). Merging starts
/// at `start_layer` (default 1 at call sites, so a previous-layer cache always
/// exists). Deterministic; extra counts go to earlier layers.
pub fn plan_schedule(
    l0: usize,
    cls_index: usize,
    target_rate: f64,
    depth: usize,
    mode: SideMode,
    start_layer: usize,
) -> Result<MergePlan> {
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::RejectedPlan(format!(
            "target_rate must be in [0, 1), got {target_rate}"
        )));
    }
    if cls_index >= l0 {
        return Err(Error::RejectedPlan(String::from("cls_index out of range")));
    }
    let total = libm::floor(l0 as f64 * target_rate + 0.5) as usize;
    let (left_total, right_total) = match mode {
        SideMode::OneSide => (total, 0),
        SideMode::BothSides => (total - total / 2, total / 2),
    };
    let left_cap = cls_index;
    let right_cap = l0 - 1 - cls_index;
    if left_total > left_cap || right_total > right_cap {
        return Err(Error::RejectedPlan(format!(
            "impossible schedule: need {left_total}/{right_total} but sides hold {left_cap}/{right_cap}"
        )));
    }
    if total > 0 && start_layer >= depth {
        return Err(Error::RejectedPlan(String::from(
            "no layers available after start_layer",
        )));
    }
    let slots = depth.saturating_sub(start_layer);
    let lefts = spread(left_total, slots);
    let rights = spread(right_total, slots);
    let mut layers = vec![LayerReduction::default(); depth];
    for i in 0..slots {
        layers[start_layer + i] = LayerReduction {
            left: lefts[i],
            right: rights[i],
        };
    }
    Ok(MergePlan {
        layers,
        mode,
        param_source: ParamSource::PreviousLayerCache,
        options: MergeOptions::default(),
    })
}

/// Outermost-first selection: the `count` tokens farthest from the class token
/// on each active side. Input-independent by design.
pub fn select_reduced(
    seq_len: usize,
    cls_index: usize,
    count: usize,
    mode: SideMode,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let left = outermost_left(seq_len, cls_index, count)?;
    let right = match mode {
        SideMode::OneSide => Vec::new(),
        SideMode::BothSides => outermost_right(seq_len, cls_index, count)?,
    };
    Ok((left, right))
}

pub fn outermost_left(_seq_len: usize, cls_index: usize, count: usize) -> Result<Vec<usize>> {
    if count > cls_index {
        return Err(Error::RejectedPlan(format!(
            "cannot reduce {count} tokens left of the class token (capacity {cls_index})"
        )));
    }
    Ok((0..count).collect())
}

pub fn outermost_right(seq_len: usize, cls_index: usize, count: usize) -> Result<Vec<usize>> {
    let cap = seq_len - 1 - cls_index;
    if count > cap {
        return Err(Error::RejectedPlan(format!(
            "cannot reduce {count} tokens right of the class token (capacity {cap})"
        )));
    }
    Ok((0..count).map(|i| seq_len - 1 - i).collect())
}

/// One merge event, as recorded for diagnostics and serialization.
#[derive(Debug, Clone)]
pub struct MergeRecord {
    pub layer: usize,
    pub kind: MergeKind,
    /// Reduced positions in pre-merge current-layer coordinates.
    pub reduced: Vec<usize>,
    /// Original (layer-0) indices of the reduced tokens.
    pub reduced_origin: Vec<usize>,
    /// Merge target in pre-merge current-layer coordinates.
    pub target: usize,
    pub target_origin: usize,
    /// Decay-times-gain weight matrices, one per reduced position.
    pub weights: Vec<Mat>,
    pub residual: f64,
    pub degenerate_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    Fwd,
    Bwd,
    /// Similarity-pair baseline event.
    Similarity,
}

impl MergeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeKind::Fwd => "fwd",
            MergeKind::Bwd => "bwd",
            MergeKind::Similarity => "sim",
        }
    }
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = crate::math::norm2(u);
    let nv = crate::math::norm2(v);
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    crate::math::dot(u, v) / (nu * nv)
}

/// Similarity-pair baseline: even/odd bipartition (class token protected),
/// each source keeps its most similar target by cosine, the top `count`
/// sources merge; groups are replaced by their arithmetic mean at the earliest
/// member position. Ties break toward lower indices.
///
/// Returns the merged tokens, the kept pre-merge positions (ascending), and
/// the merge groups as (sources, target) pairs.
pub fn baseline_tome_merge(
    tokens: &[Vec<f64>],
    cls_index: usize,
    count: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<(Vec<usize>, usize)>)> {
    let len = tokens.len();
    if count >= len {
        return Err(Error::RejectedInput("tome count must be below sequence length"));
    }
    if count == 0 {
        return Ok((tokens.to_vec(), (0..len).collect(), Vec::new()));
    }
    let sources: Vec<usize> = (0..len).filter(|p| *p != cls_index && p % 2 == 0).collect();
    let targets: Vec<usize> = (0..len).filter(|p| *p != cls_index && p % 2 == 1).collect();
    if count > sources.len() || targets.is_empty() {
        return Err(Error::RejectedInput("tome count exceeds bipartition capacity"));
    }
    // Best target per source, then the top-count sources by similarity.
    let mut scored: Vec<(usize, usize, f64)> = sources
        .iter()
        .map(|&a| {
            let mut best = (targets[0], cosine(&tokens[a], &tokens[targets[0]]));
            for &b in &targets[1..] {
                let s = cosine(&tokens[a], &tokens[b]);
                if s > best.1 {
                    best = (b, s);
                }
            }
            (a, best.0, best.1)
        })
        .collect();
    scored.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    let selected = &scored[..count];

    // Group selected sources by target; the group mean replaces the earliest
    // member, all other members disappear.
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(a, b, _) in selected {
        match groups.iter_mut().find(|(t, _)| *t == b) {
            Some((_, v)) => v.push(a),
            None => groups.push((b, vec![a])),
        }
    }
    for (_, v) in groups.iter_mut() {
        v.sort_unstable();
    }
    groups.sort_unstable_by_key(|(t, _)| *t);

    let d_model = tokens[0].len();
    let mut removed = vec![false; len];
    let mut replacement: Vec<Option<Vec<f64>>> = vec![None; len];
    let mut events = Vec::with_capacity(groups.len());
    for (target, members) in &groups {
        let mut all: Vec<usize> = members.clone();
        all.push(*target);
        all.sort_unstable();
        let keep = all[0];
        let mut mean = vec![0.0; d_model];
        for &m in &all {
            for d in 0..d_model {
                mean[d] += tokens[m][d];
            }
        }
        for v in mean.iter_mut() {
            *v /= all.len() as f64;
        }
        for &m in &all {
            if m != keep {
                removed[m] = true;
            }
        }
        replacement[keep] = Some(mean);
        events.push((members.clone(), *target));
    }
    let mut kept = Vec::new();
    let mut out = Vec::new();
    for p in 0..len {
        if !removed[p] {
            kept.push(p);
            out.push(match replacement[p].take() {
                Some(v) => v,
                None => tokens[p].clone(),
            });
        }
    }
    Ok((out, kept, events))
}

/// Merge method applied by the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMethod {
    /// Compensated nearest-neighbor merging (this crate's method).
    Stm,
    /// Similarity-pair averaging baseline.
    ToMeBaseline,
}

struct GapParams {
    a: Vec<Mat>,
    b: Vec<Mat>,
}

fn gap_params_from_cache(
    cache: &LayerCache,
    dir: Direction,
    lo: usize,
    hi: usize,
) -> GapParams {
    let (a_src, b_src) = match dir {
        Direction::Forward => (&cache.fwd_a, &cache.fwd_b),
        Direction::Backward => (&cache.bwd_a, &cache.bwd_b),
    };
    GapParams {
        a: a_src[lo..=hi].to_vec(),
        b: b_src[lo..=hi].to_vec(),
    }
}

fn gap_params_from_projection(
    seq: &TokenSequence,
    params: &VimLayerParams,
    dir: Direction,
    lo: usize,
    hi: usize,
) -> Result<GapParams> {
    let proj = params.proj(dir);
    let mut a = Vec::with_capacity(hi - lo + 1);
    let mut b = Vec::with_capacity(hi - lo + 1);
    for p in lo..=hi {
        let step = discretize_token(&seq.tokens[p], proj)?;
        a.push(step.a_bar);
        b.push(step.b_bar);
    }
    Ok(GapParams { a, b })
}

fn current_gain(
    seq: &TokenSequence,
    params: &VimLayerParams,
    dir: Direction,
    pos: usize,
) -> Result<Mat> {
    let step = discretize_token(&seq.tokens[pos], params.proj(dir))?;
    Ok(step.b_bar)
}

/// Apply the scheduled reduction for one layer: select the outermost tokens,
/// merge the pre-class run forward and the post-class run backward (per-
/// direction caches feed per-direction merges), compact the sequence, and
/// update the class index and origin map.
pub fn apply_merge(
    seq: &TokenSequence,
    plan: &MergePlan,
    layer: usize,
    cache: Option<&LayerCache>,
    params: &VimLayerParams,
    method: MergeMethod,
) -> Result<(TokenSequence, Vec<MergeRecord>, RetainedIndexSet)> {
    let len = seq.len();
    let reduction = plan.layer(layer);
    if reduction.total() == 0 {
        let retained = RetainedIndexSet::new((0..len).collect(), len)?;
        return Ok((seq.clone(), Vec::new(), retained));
    }

    if method == MergeMethod::ToMeBaseline {
        let (tokens, kept, events) = baseline_tome_merge(&seq.tokens, seq.cls_index, reduction.total())?;
        let retained = RetainedIndexSet::new(kept.clone(), len)?;
        let records = events
            .into_iter()
            .map(|(srcs, target)| MergeRecord {
                layer,
                kind: MergeKind::Similarity,
                reduced_origin: srcs.iter().map(|&p| seq.origin[p]).collect(),
                reduced: srcs,
                target,
                target_origin: seq.origin[target],
                weights: Vec::new(),
                residual: 0.0,
                degenerate_channels: 0,
            })
            .collect();
        let out = compact(seq, &retained, &[]);
        return Ok((out, records, retained));
    }

    let left = outermost_left(len, seq.cls_index, reduction.left)?;
    let right = outermost_right(len, seq.cls_index, reduction.right)?;
    let mut removed: Vec<usize> = left.iter().chain(right.iter()).copied().collect();
    removed.sort_unstable();
    if removed.contains(&seq.cls_index) {
        return Err(Error::RejectedPlan(String::from(
            "plan would reduce the class token",
        )));
    }
    let retained = RetainedIndexSet::from_removed(len, &removed)?;

    let use_cache = plan.param_source == ParamSource::PreviousLayerCache && cache.is_some();
    if let Some(c) = cache {
        if use_cache && c.origin != seq.origin {
            return Err(Error::RejectedInput(
                "layer cache does not cover the current sequence",
            ));
        }
    }

    let mut records = Vec::new();
    let mut replacements: Vec<(usize, Vec<f64>)> = Vec::new();

    if reduction.left > 0 {
        let k = 0;
        let (lo, hi) = retained.fwd_gap(k);
        let gp = if use_cache {
            gap_params_from_cache(cache.unwrap(), Direction::Forward, lo, hi)
        } else {
            gap_params_from_projection(seq, params, Direction::Forward, lo, hi)?
        };
        let gain_override = if plan.options.target_gain_from_current && use_cache {
            Some(current_gain(seq, params, Direction::Forward, hi)?)
        } else {
            None
        };
        let outcome = merge_fwd_with_gain(
            &seq.tokens,
            &retained,
            k,
            &gp.a,
            &gp.b,
            gain_override.as_ref(),
            &plan.options,
        )?;
        let target = retained.q()[k];
        records.push(MergeRecord {
            layer,
            kind: MergeKind::Fwd,
            reduced_origin: left.iter().map(|&p| seq.origin[p]).collect(),
            reduced: left,
            target,
            target_origin: seq.origin[target],
            weights: outcome.weights,
            residual: outcome.residual,
            degenerate_channels: outcome.degenerate_channels,
        });
        replacements.push((target, outcome.token));
    }

    if reduction.right > 0 {
        let k = retained.retained_count() - 1;
        let (lo, hi) = retained.bwd_gap(k);
        let gp = if use_cache {
            gap_params_from_cache(cache.unwrap(), Direction::Backward, lo, hi)
        } else {
            gap_params_from_projection(seq, params, Direction::Backward, lo, hi)?
        };
        let gain_override = if plan.options.target_gain_from_current && use_cache {
            Some(current_gain(seq, params, Direction::Backward, lo)?)
        } else {
            None
        };
        let outcome = merge_bwd_with_gain(
            &seq.tokens,
            &retained,
            k,
            &gp.a,
            &gp.b,
            gain_override.as_ref(),
            &plan.options,
        )?;
        let target = retained.q()[k];
        records.push(MergeRecord {
            layer,
            kind: MergeKind::Bwd,
            reduced_origin: right.iter().map(|&p| seq.origin[p]).collect(),
            reduced: right,
            target,
            target_origin: seq.origin[target],
            weights: outcome.weights,
            residual: outcome.residual,
            degenerate_channels: outcome.degenerate_channels,
        });
        replacements.push((target, outcome.token));
    }

    let out = compact(seq, &retained, &replacements);
    Ok((out, records, retained))
}

fn compact(
    seq: &TokenSequence,
    retained: &RetainedIndexSet,
    replacements: &[(usize, Vec<f64>)],
) -> TokenSequence {
    let mut tokens = Vec::with_capacity(retained.retained_count());
    let mut origin = Vec::with_capacity(retained.retained_count());
    let mut cls_index = 0;
    for (new_pos, &p) in retained.q().iter().enumerate() {
        if p == seq.cls_index {
            cls_index = new_pos;
        }
        let tok = replacements
            .iter()
            .find(|(t, _)| *t == p)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| seq.tokens[p].clone());
        tokens.push(tok);
        origin.push(seq.origin[p]);
    }
    TokenSequence {
        tokens,
        cls_index,
        layer_index: seq.layer_index,
        origin,
    }
}
