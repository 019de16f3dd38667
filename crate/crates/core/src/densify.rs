//! Depth- and schedule-modulated densification thresholds driving the usual
//! clone / split / prune passes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lie::Vec3;
use crate::scene::{GaussianPrimitive, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyConfig {
    /// Base threshold on the mean view-space positional gradient norm.
    pub tau0: f64,
    /// Near-field gain.
    pub alpha: f64,
    /// Depth decay rate, per unit of normalized depth.
    pub beta: f64,
    /// First-stage linear decay over normalized time.
    pub gamma: f64,
    /// Second-stage decay base per densification interval.
    pub eta: f64,
    /// Iteration at which the second stage starts.
    pub t_split: usize,
    pub interval: usize,
    pub start: usize,
    pub until: usize,
    pub min_opacity: f64,
    /// Primitives whose largest scale is below this fraction of the scene
    /// extent are cloned, larger ones split.
    pub clone_scale_fraction: f64,
    pub split_scale_divisor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            tau0: 2e-4,
            alpha: 2.0,
            beta: 0.5,
            gamma: 0.2,
            eta: 0.995,
            t_split: 0,
            interval: 100,
            start: 500,
            until: usize::MAX,
            min_opacity: 0.005,
            clone_scale_fraction: 0.01,
            split_scale_divisor: 1.6,
        }
    }
}

impl DensifyConfig {
    /// Disables both modulations: the threshold is `tau0` everywhere.
    pub fn fixed(mut self) -> Self {
        self.alpha = 0.0;
        self.gamma = 0.0;
        self.eta = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau0 > 0.0) {
            return bad("tau0 must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return bad("alpha, beta and gamma must be non-negative");
        }
        if !(self.gamma < 1.0) {
            return bad("gamma must be below 1 so the first-stage threshold stays positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.interval == 0 {
            return bad("densify interval must be positive");
        }
        if !(self.split_scale_divisor > 0.0) {
            return bad("split scale divisor must be positive");
        }
        Ok(())
    }

    pub fn is_scheduled(&self, t: usize) -> bool {
        t > 0 && t >= self.start && t <= self.until && t % self.interval == 0
    }

    fn space_factor(&self, d: f64) -> f64 {
        1.0 + self.alpha * (-self.beta * d).exp()
    }

    fn time_factor(&self, t: usize) -> f64 {
        if t < self.t_split {
            1.0 - self.gamma * (t as f64 / self.t_split as f64)
        } else {
            self.eta.powi(((t - self.t_split) / self.interval) as i32)
        }
    }
}

/// `tau0 * (1 + alpha * exp(-beta * d))` for depth `d` in scene extents.
pub fn space_threshold(d: f64, cfg: &DensifyConfig) -> f64 {
    cfg.tau0 * cfg.space_factor(d)
}

/// Linear decay over the first stage, geometric over the second; `tau0` at
/// the start of each.
pub fn time_threshold(t: usize, cfg: &DensifyConfig) -> f64 {
    cfg.tau0 * cfg.time_factor(t)
}

/// `tau0` scaled by both modulation factors.
pub fn coupled_threshold(d: f64, t: usize, cfg: &DensifyConfig) -> f64 {
    cfg.tau0 * cfg.space_factor(d) * cfg.time_factor(t)
}

/// Running gradient statistics per primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyState {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
    /// Latest observed camera-frame depth, in scene extents.
    pub depth: Vec<f64>,
    /// Summed world-space positional gradient, for clone offsets.
    pub direction: Vec<Vec3>,
}

impl DensifyState {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
            depth: vec![f64::INFINITY; n],
            direction: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Adds one view's pooled gradients. `depths` are raw camera-frame depths
    /// and are divided by `extent`.
    pub fn accumulate(
        &mut self,
        view_grads: &[[f64; 2]],
        world_grads: &[[f64; 3]],
        depths: &[Option<f64>],
        extent: f64,
    ) -> Result<()> {
        let n = self.len();
        if view_grads.len() != n || world_grads.len() != n || depths.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "densify statistics for {n} primitives got {}/{}/{} entries",
                view_grads.len(),
                world_grads.len(),
                depths.len()
            )));
        }
        for i in 0..n {
            if let Some(z) = depths[i] {
                let [gx, gy] = view_grads[i];
                self.grad_accum[i] += gx.hypot(gy);
                self.count[i] += 1;
                self.depth[i] = z / extent;
                self.direction[i] += Vec3::from(world_grads[i]);
            }
        }
        Ok(())
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.count[i] as f64
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.len());
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For each primitive of the new scene, the old index whose optimizer
    /// state it keeps, or `None` for a fresh primitive.
    pub origin: Vec<Option<usize>>,
}

/// One densification pass at iteration `t`. Survivors keep their order;
/// clones and then split children are appended. Statistics are reset.
pub fn densify_and_prune<R: Rng>(
    scene: &mut Scene,
    state: &mut DensifyState,
    cfg: &DensifyConfig,
    t: usize,
    rng: &mut R,
) -> Result<DensifyReport> {
    if state.len() != scene.len() {
        return Err(Error::ShapeMismatch(format!(
            "densify state tracks {} primitives, scene has {}",
            state.len(),
            scene.len()
        )));
    }
    let clone_limit = cfg.clone_scale_fraction * scene.extent;
    let mut kept = Vec::with_capacity(scene.len());
    let mut clones = Vec::new();
    let mut children = Vec::new();
    let mut report = DensifyReport::default();

    for (i, g) in scene.primitives.iter().enumerate() {
        if g.opacity() < cfg.min_opacity {
            report.pruned += 1;
            continue;
        }
        let grow = state.count[i] > 0 && state.mean_grad(i) > coupled_threshold(state.depth[i], t, cfg);
        if !grow {
            kept.push((Some(i), g.clone()));
            continue;
        }
        let scales = g.scales();
        if scales.max() <= clone_limit {
            let mut c = g.clone();
            let dir = state.direction[i];
            if dir.norm() > 0.0 {
                c.mean -= 0.5 * scales.max() * dir.normalize();
            }
            kept.push((Some(i), g.clone()));
            clones.push((None, c));
            report.cloned += 1;
        } else {
            let rot = g.rotation_matrix();
            for _ in 0..2 {
                let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                let mut c = g.clone();
                c.mean += rot * scales.component_mul(&z);
                c.log_scale = g.log_scale.map(|s| s - cfg.split_scale_divisor.ln());
                children.push((None, c));
            }
            report.split += 1;
        }
    }

    let (origin, prims): (Vec<Option<usize>>, Vec<GaussianPrimitive>) =
        kept.into_iter().chain(clones).chain(children).unzip();
    if prims.is_empty() {
        return Err(Error::InsufficientPoints(0));
    }
    scene.primitives = prims;
    report.origin = origin;
    *state = DensifyState::new(scene.len());
    Ok(report)
}
