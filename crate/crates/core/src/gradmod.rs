//! Per-layer gradient modulation between the enhancement and separation tasks.
//!
//! A layer's two task gradients conflict when their dot product is negative.
//! Conflicting enhancement gradients are replaced by their projection onto the
//! normal plane of the separation gradient; aligned ones pass through.

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Squared SS-gradient norms below this skip the projection for that layer.
pub const DEGENERATE_SQ_NORM: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Se,
    Ss,
    Combined,
}

/// Flattened per-layer gradients of one task, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub task: Task,
    layers: IndexMap<String, Vec<f64>>,
}

impl GradientSet {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            layers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.layers.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layers.get(name).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Keeps only the layers selected by `keep`, preserving order.
    pub fn restrict(mut self, keep: impl Fn(&str) -> bool) -> Self {
        self.layers.retain(|k, _| keep(k));
        self
    }

    /// Same keys and lengths, all zeros.
    pub fn zeros_like(&self, task: Task) -> Self {
        Self {
            task,
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.layers.values_mut() {
            for g in v.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(|v| v.iter().all(|g| g.is_finite()))
    }

    /// First layer holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layers
            .iter()
            .find(|(_, v)| v.iter().any(|g| !g.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Cosine below which two layer gradients count as conflicting. Projected
/// gradients sit at cosine ≈ 0 up to rounding, so a zero threshold would
/// flag them again.
pub const CONFLICT_COS_TOL: f64 = 1e-12;

const PARALLEL_REL_SQ: f64 = 1e-24;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether `se` and `ss` conflict: `se·ss < −tol·‖se‖‖ss‖`.
pub fn conflicts(se: &[f64], ss: &[f64]) -> bool {
    let d = dot(se, ss);
    d < 0.0 && d < -CONFLICT_COS_TOL * (dot(se, se) * dot(ss, ss)).sqrt()
}

/// Projects `se` onto the normal plane of `ss` when the two conflict.
pub fn modulate_layer(se: &[f64], ss: &[f64]) -> Vec<f64> {
    if !conflicts(se, ss) {
        return se.to_vec();
    }
    let d = dot(se, ss);
    let nn = dot(ss, ss);
    if nn < DEGENERATE_SQ_NORM {
        return se.to_vec();
    }
    let c = d / nn;
    let mut out: Vec<f64> = se.iter().zip(ss).map(|(g, s)| g - c * s).collect();
    // a second pass removes the rounding residual along `ss`
    let d2 = dot(&out, ss);
    if d2 < 0.0 {
        let c2 = d2 / nn;
        for (o, s) in out.iter_mut().zip(ss) {
            *o -= c2 * s;
        }
    }
    // parallel inputs leave only rounding noise; the exact result is zero
    if dot(&out, &out) <= PARALLEL_REL_SQ * dot(se, se) {
        out.fill(0.0);
    }
    out
}

fn shared<'a>(
    g_se: &'a GradientSet,
    g_ss: &'a GradientSet,
    op: &'static str,
) -> Result<Vec<(&'a str, &'a [f64], &'a [f64])>> {
    g_se.iter()
        .map(|(name, se)| {
            let ss = g_ss
                .get(name)
                .ok_or_else(|| Error::Scope(format!("{op}: layer `{name}` missing from SS set")))?;
            if ss.len() != se.len() {
                return Err(Error::Scope(format!(
                    "{op}: layer `{name}` has {} SE vs {} SS values",
                    se.len(),
                    ss.len()
                )));
            }
            Ok((name, se, ss))
        })
        .collect()
}

/// Modulates every layer of `g_se` against the matching layer of `g_ss`.
pub fn modulate(g_se: &GradientSet, g_ss: &GradientSet) -> Result<GradientSet> {
    let mut out = GradientSet::new(Task::Se);
    for (name, se, ss) in shared(g_se, g_ss, "modulate")? {
        out.insert(name, modulate_layer(se, ss));
    }
    Ok(out)
}

/// Per-layer sum over the SS scope; layers without an SE gradient take the
/// SS gradient unchanged.
pub fn combine(g_se: &GradientSet, g_ss: &GradientSet) -> Result<GradientSet> {
    shared(g_se, g_ss, "combine")?;
    let mut out = GradientSet::new(Task::Combined);
    for (name, ss) in g_ss.iter() {
        let v = match g_se.get(name) {
            Some(se) => ss.iter().zip(se).map(|(a, b)| a + b).collect(),
            None => ss.to_vec(),
        };
        out.insert(name, v);
    }
    Ok(out)
}

/// Conflict count over the layers both sets share.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConflictStats {
    pub conflicting: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn conflict_stats(g_se: &GradientSet, g_ss: &GradientSet) -> Result<ConflictStats> {
    let layers = shared(g_se, g_ss, "conflict_stats")?;
    if layers.is_empty() {
        return Err(Error::Scope("conflict_stats: empty shared scope".into()));
    }
    let conflicting = layers.iter().filter(|(_, se, ss)| conflicts(se, ss)).count();
    Ok(ConflictStats {
        conflicting,
        total: layers.len(),
        fraction: conflicting as f64 / layers.len() as f64,
    })
}

/// Running mean of per-batch conflict fractions within one epoch.
#[derive(Clone, Debug, Default)]
pub struct ConflictTracker {
    sum: f64,
    batches: usize,
}

impl ConflictTracker {
    pub fn record(&mut self, s: &ConflictStats) {
        self.sum += s.fraction;
        self.batches += 1;
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn mean(&self) -> Option<f64> {
        (self.batches > 0).then(|| self.sum / self.batches as f64)
    }
}
