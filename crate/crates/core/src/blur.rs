//! Exposure trajectories and the blurred-image model: a blurred frame is the
//! softmax-weighted sum of sharp subframes rendered along the trajectory.

use nalgebra::Matrix6;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::{interpolate_pose, se3_log, Pose, SchemeKind, Twist};
use crate::raster::{render, CameraIntrinsics, RenderGraph, RenderSettings};
use crate::scene::Scene;

pub const DEFAULT_SUBFRAMES: usize = 21;

/// Step for the numerical trajectory Jacobians.
const JACOBIAN_STEP: f64 = 1e-6;

/// Which parameters a trajectory's control poses represent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Controls are world-to-camera poses.
    Pose,
    /// Controls are rigid scene transforms applied before a frozen camera
    /// anchor; the effective camera is `anchor * M(s)`.
    Rigid,
}

impl Stage {
    pub fn number(&self) -> u8 {
        match self {
            Stage::Pose => 1,
            Stage::Rigid => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurTrajectory {
    pub stage: Stage,
    pub scheme: SchemeKind,
    pub controls: Vec<Pose>,
    /// Frozen mid-exposure camera pose. Identity in the pose stage.
    pub anchor: Pose,
    /// One logit per subframe; blend weights are their softmax.
    pub weight_logits: Vec<f64>,
}

impl BlurTrajectory {
    pub fn new(scheme: SchemeKind, controls: Vec<Pose>, n_subframes: usize) -> Result<Self> {
        scheme.check_control_count(controls.len())?;
        if n_subframes == 0 {
            return Err(Error::ParameterOutOfRange("need at least one subframe".into()));
        }
        Ok(Self {
            stage: Stage::Pose,
            scheme,
            controls,
            anchor: Pose::identity(),
            weight_logits: vec![0.0; n_subframes],
        })
    }

    /// Every control at `pose`: a motionless exposure.
    pub fn stationary(pose: Pose, scheme: SchemeKind, control_count: usize, n_subframes: usize) -> Result<Self> {
        Self::new(scheme, vec![pose; control_count], n_subframes)
    }

    pub fn n_subframes(&self) -> usize {
        self.weight_logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.weight_logits)
    }

    pub fn sample_params(&self) -> Vec<f64> {
        sample_params(self.n_subframes())
    }

    /// Effective world-to-camera pose at exposure parameter `s`.
    pub fn pose_at(&self, s: f64) -> Result<Pose> {
        let p = interpolate_pose(&self.controls, s, self.scheme)?;
        Ok(match self.stage {
            Stage::Pose => p,
            Stage::Rigid => self.anchor * p,
        })
    }

    pub fn mid_pose(&self) -> Result<Pose> {
        self.pose_at(0.5)
    }

    /// Re-expresses the trajectory as rigid scene transforms relative to its
    /// frozen mid-exposure pose. The effective poses are unchanged.
    pub fn to_rigid_stage(&self) -> Result<BlurTrajectory> {
        if self.stage == Stage::Rigid {
            return Ok(self.clone());
        }
        let anchor = self.mid_pose()?;
        let inv = anchor.inverse();
        Ok(BlurTrajectory {
            stage: Stage::Rigid,
            anchor,
            controls: self.controls.iter().map(|c| inv * *c).collect(),
            ..self.clone()
        })
    }

    /// Jacobians of the effective pose at `s` with respect to a left
    /// perturbation of each control, both sides in left-twist coordinates.
    pub fn control_jacobians(&self, s: f64) -> Result<Vec<Matrix6<f64>>> {
        let base_inv = self.pose_at(s)?.inverse();
        let mut out = Vec::with_capacity(self.controls.len());
        let mut probe = self.clone();
        for c in 0..self.controls.len() {
            let mut jac = Matrix6::zeros();
            for k in 0..6 {
                let mut column = [0.0; 6];
                for (sign, slot) in [(1.0, 0usize), (-1.0, 1)] {
                    let mut e = [0.0; 6];
                    e[k] = sign * JACOBIAN_STEP;
                    probe.controls[c] = self.controls[c].perturb_left(&Twist::from_vector(&e.into()));
                    let moved = probe.pose_at(s)?;
                    let delta = se3_log(&(moved * base_inv))?.to_vector();
                    for r in 0..6 {
                        if slot == 0 {
                            column[r] += delta[r];
                        } else {
                            column[r] -= delta[r];
                        }
                    }
                }
                for r in 0..6 {
                    jac[(r, k)] = column[r] / (2.0 * JACOBIAN_STEP);
                }
            }
            probe.controls[c] = self.controls[c];
            out.push(jac);
        }
        Ok(out)
    }

    /// Pulls per-subframe pose gradients back to the control poses.
    pub fn control_gradients(&self, subframe_grads: &[Twist]) -> Result<Vec<Twist>> {
        let params = self.sample_params();
        if subframe_grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} subframe gradients for {} subframes",
                subframe_grads.len(),
                params.len()
            )));
        }
        let mut out = vec![nalgebra::Vector6::zeros(); self.controls.len()];
        for (s, g) in params.iter().zip(subframe_grads) {
            let g = g.to_vector();
            for (acc, jac) in out.iter_mut().zip(self.control_jacobians(*s)?) {
                *acc += jac.transpose() * g;
            }
        }
        Ok(out.iter().map(Twist::from_vector).collect())
    }
}

/// `s_i = i / (n - 1)`; a single subframe sits at mid-exposure.
pub fn sample_params(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

pub fn sample_trajectory(traj: &BlurTrajectory) -> Result<Vec<Pose>> {
    traj.sample_params().iter().map(|&s| traj.pose_at(s)).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Rendered subframes of one blurred image, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SubframeStack {
    pub images: Vec<Image>,
    pub graphs: Vec<RenderGraph>,
    pub params: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SubframeStack {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `sum_i w_i * images[i]` for weights summing to one, evaluated as
/// `C_0 + sum_{i>0} w_i (C_i - C_0)` in index order so that identical
/// subframes reproduce `C_0` bit for bit.
pub fn blend(images: &[Image], weights: &[f64]) -> Result<Image> {
    let first = images.first().ok_or(Error::EmptyStack)?;
    if images.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images for {} weights",
            images.len(),
            weights.len()
        )));
    }
    let mut out = first.clone();
    for (img, &w) in images.iter().zip(weights).skip(1) {
        out.check_same_shape(img)?;
        for ((o, v), c0) in out.data_mut().iter_mut().zip(img.data()).zip(first.data()) {
            *o += w * (v - c0);
        }
    }
    Ok(out)
}

pub fn synthesize_blur(
    scene: &Scene,
    traj: &BlurTrajectory,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<(Image, SubframeStack)> {
    if scene.is_empty() {
        return Err(Error::ParameterOutOfRange("cannot render an empty scene".into()));
    }
    let params = traj.sample_params();
    let poses = sample_trajectory(traj)?;
    let (images, graphs): (Vec<Image>, Vec<RenderGraph>) = poses
        .par_iter()
        .map(|pose| render(scene, pose, k, settings))
        .unzip();
    let weights = traj.weights();
    let blurred = blend(&images, &weights)?;
    Ok((
        blurred,
        SubframeStack {
            images,
            graphs,
            params,
            weights,
        },
    ))
}

/// Returns `(dL/dC_i, dL/d logit_i)` given `dL/dB`.
pub fn blur_backward(stack: &SubframeStack, dl_dblur: &Image) -> Result<(Vec<Image>, Vec<f64>)> {
    let n = stack.len();
    if stack.weights.len() != n {
        return Err(Error::ShapeMismatch("stack weights do not match images".into()));
    }
    let mut per_frame = Vec::with_capacity(n);
    let mut dl_dw = Vec::with_capacity(n);
    for (img, &w) in stack.images.iter().zip(&stack.weights) {
        img.check_same_shape(dl_dblur)?;
        let data = dl_dblur.data().iter().map(|g| w * g).collect();
        per_frame.push(Image::from_data(img.width(), img.height(), data)?);
        dl_dw.push(img.data().iter().zip(dl_dblur.data()).map(|(c, g)| c * g).sum::<f64>());
    }
    Ok((per_frame, softmax_backward(&stack.weights, &dl_dw)))
}

/// `J^T g` for the softmax Jacobian `J_ij = w_i (delta_ij - w_j)`.
pub fn softmax_backward(weights: &[f64], dl_dw: &[f64]) -> Vec<f64> {
    let inner: f64 = weights.iter().zip(dl_dw).map(|(w, g)| w * g).sum();
    weights.iter().zip(dl_dw).map(|(w, g)| w * (g - inner)).collect()
}

pub fn softmax_jacobian(weights: &[f64]) -> Vec<Vec<f64>> {
    weights
        .iter()
        .enumerate()
        .map(|(i, wi)| {
            weights
                .iter()
                .enumerate()
                .map(|(j, wj)| wi * (if i == j { 1.0 } else { 0.0 } - wj))
                .collect()
        })
        .collect()
}
