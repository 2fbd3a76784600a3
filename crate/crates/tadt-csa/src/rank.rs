//! Quantile pairwise ranking over hashed sub-trajectory groups.
//!
//! Samples whose transformed sub-trajectories (code ids, actions, binned
//! return signals) match exactly are grouped; within each group the top
//! `floor(beta * N)` members by RTG become positives and the rest
//! negatives, and each (positive, negative) pair contributes a margin
//! logistic term on the predicted logits of their own ground-truth
//! actions.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::Scalar;
use crate::rng::stream;
use rand::Rng;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

/// One (code, action, binned-return) step of a transformed sub-trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyStep {
    pub code: u32,
    pub action: u32,
    pub rtg_bin: i64,
    pub ta_bin: i64,
}

/// Full group key: steps before `t` plus the code at `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupKey {
    pub steps: Vec<KeyStep>,
    pub last_code: u32,
}

impl GroupKey {
    /// 64-bit digest of the key. Group membership is decided by full key
    /// equality; the digest is exported for logging.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

/// A member is one (sample, t) position with its raw RTG value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMember {
    pub sample: usize,
    pub t: usize,
    pub rtg: f64,
}

#[derive(Debug, Clone)]
pub struct Group {
    pub key: GroupKey,
    pub members: Vec<GroupMember>,
}

/// Groups keyed per timestep, in deterministic (t, key-digest) order.
#[derive(Debug, Clone, Default)]
pub struct GroupTable {
    pub groups: Vec<Group>,
}

pub fn bin_return(x: f64, bin_width: f64) -> i64 {
    (x / bin_width).round() as i64
}

/// Per-sample inputs to grouping: code ids, actions, and raw (rtg, ta)
/// per timestep.
pub struct GroupInput<'a> {
    pub codes: &'a [usize],
    pub actions: &'a [usize],
    pub rtg: &'a [f64],
    pub ta: &'a [f64],
}

/// Hashes every (sample, t) prefix into groups. Two positions share a
/// group iff their transformed sub-trajectories `(c_1, a_1, R~_1, ...,
/// c_t)` are identical after return binning.
pub fn build_groups(samples: &[GroupInput], bin_width: f64) -> Result<GroupTable> {
    if bin_width <= 0.0 {
        return Err(Error::InvalidParameter(format!("bin_width {bin_width} must be > 0")));
    }
    let mut by_key: HashMap<GroupKey, Vec<GroupMember>> = HashMap::new();
    for (si, s) in samples.iter().enumerate() {
        let t_len = s.codes.len();
        if s.actions.len() != t_len || s.rtg.len() != t_len || s.ta.len() != t_len {
            return Err(Error::Shape(format!(
                "sample {si}: codes {} actions {} rtg {} ta {}",
                s.codes.len(),
                s.actions.len(),
                s.rtg.len(),
                s.ta.len()
            )));
        }
        let mut steps: Vec<KeyStep> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let key = GroupKey { steps: steps.clone(), last_code: s.codes[t] as u32 };
            by_key
                .entry(key)
                .or_default()
                .push(GroupMember { sample: si, t, rtg: s.rtg[t] });
            steps.push(KeyStep {
                code: s.codes[t] as u32,
                action: s.actions[t] as u32,
                rtg_bin: bin_return(s.rtg[t], bin_width),
                ta_bin: bin_return(s.ta[t], bin_width),
            });
        }
    }
    let mut groups: Vec<Group> = by_key
        .into_iter()
        .map(|(key, members)| Group { key, members })
        .collect();
    groups.sort_by_key(|group| {
        (
            group.key.steps.len(),
            group.key.digest(),
            group.members.first().map(|m| (m.sample, m.t)),
        )
    });
    Ok(GroupTable { groups })
}

/// Indices of the k largest values. The order is total: value descending,
/// then index ascending, so ties prefer the lower index. Expected O(n)
/// via quickselect partitioning.
pub fn quickselect_topk(values: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k > n {
        return Err(Error::InvalidParameter(format!("k = {k} > n = {n}")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // better(a, b): a strictly precedes b in the top-k order.
    let better = |a: usize, b: usize| values[a] > values[b] || (values[a] == values[b] && a < b);

    let (mut lo, mut hi) = (0usize, n - 1);
    while lo < hi {
        // Median-of-three pivot for deterministic O(n) expected behavior.
        let mid = lo + (hi - lo) / 2;
        let (a, b, c) = (idx[lo], idx[mid], idx[hi]);
        let pivot = if better(a, b) ^ better(a, c) {
            a
        } else if better(b, a) ^ better(b, c) {
            b
        } else {
            c
        };
        // Hoare-style partition over `better`.
        let mut i = lo;
        let mut j = hi;
        loop {
            while better(idx[i], pivot) {
                i += 1;
            }
            while better(pivot, idx[j]) {
                j -= 1;
            }
            if i >= j {
                break;
            }
            idx.swap(i, j);
            i += 1;
            j = j.saturating_sub(1);
        }
        if k <= j {
            hi = j;
        } else if k > j + 1 {
            lo = j + 1;
        } else {
            break;
        }
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Positive/negative split of one group.
#[derive(Debug, Clone)]
pub struct GroupSplit {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Splits group member positions by the beta-quantile top-k rule.
/// Returns `None` when the group cannot produce pairs.
pub fn split_group(members: &[GroupMember], beta: f64) -> Result<Option<GroupSplit>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("beta {beta} outside (0, 1)")));
    }
    let n = members.len();
    let k_pos = ((beta * n as f64).floor() as usize).min(n);
    if k_pos == 0 || k_pos == n {
        return Ok(None);
    }
    let rtgs: Vec<f64> = members.iter().map(|m| m.rtg).collect();
    let pos = quickselect_topk(&rtgs, k_pos)?;
    let mut is_pos = vec![false; n];
    for &i in &pos {
        is_pos[i] = true;
    }
    let neg = (0..n).filter(|&i| !is_pos[i]).collect();
    Ok(Some(GroupSplit { positives: pos, negatives: neg }))
}

/// Pairwise ranking loss over groups.
///
/// `own_logits[sample][t]` is the graph scalar of the predicted logit for
/// that position's ground-truth action. Each retained pair contributes
/// `-ln sigma(l_pos - l_neg - delta)`; pairs beyond `pair_cap` per group
/// are subsampled deterministically from `seed`. Returns `None` when no
/// group yields pairs.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_rank_loss<S: Scalar>(
    g: &mut Graph<S>,
    table: &GroupTable,
    own_logits: &[Vec<Var>],
    beta: f64,
    delta: f64,
    pair_cap: usize,
    seed: u64,
    reduction: crate::csa::Reduction,
) -> Result<Option<Var>> {
    if delta < 0.0 {
        return Err(Error::InvalidParameter(format!("delta {delta} must be >= 0")));
    }
    let mut terms: Vec<Var> = Vec::new();
    for (gi, group) in table.groups.iter().enumerate() {
        let Some(split) = split_group(&group.members, beta)? else { continue };
        // Pairs with tied RTG carry no preference; keep only strict ones.
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &p in &split.positives {
            for &q in &split.negatives {
                if group.members[p].rtg > group.members[q].rtg {
                    pairs.push((p, q));
                }
            }
        }
        if pair_cap > 0 && pairs.len() > pair_cap {
            let mut rng = stream(seed, "rank-pairs", gi as u64);
            for i in 0..pair_cap {
                let j = rng.gen_range(i..pairs.len());
                pairs.swap(i, j);
            }
            pairs.truncate(pair_cap);
        }
        for (p, q) in pairs {
            let mp = group.members[p];
            let mq = group.members[q];
            let lp = own_logits[mp.sample][mp.t];
            let lq = own_logits[mq.sample][mq.t];
            let diff = g.sub(lp, lq)?;
            let margined = g.offset(diff, -delta);
            let negated = g.neg(margined);
            terms.push(g.softplus(negated));
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(crate::csa::reduce(g, &terms, reduction)?))
}
