//! Tile-based differentiable rasterization of a [`Scene`].
//!
//! Forward: every primitive is projected with the EWA affine approximation,
//! sorted globally by camera depth, binned into 16x16 tiles and alpha
//! composited front to back per pixel.
//!
//! Backward: exact adjoints for all Gaussian parameters (mean, rotation,
//! scale, opacity, color), plus a camera-pose gradient that flows through the
//! projected centers only. The dependence of the projected covariance on the
//! pose is dropped from the pose gradient; the Gaussian-parameter gradients
//! keep it.
//!
//! Tiles are processed in parallel. Per-tile gradient partials are merged in
//! tile order, so results do not depend on the number of worker threads.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lie::{Mat3, Pose, Twist, Vec3};
use crate::scene::{GaussianPrimitive, Scene};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

pub const TILE_SIZE: usize = 16;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::ParameterOutOfRange(format!(
                "invalid intrinsics {self:?}"
            )))
        }
    }

    pub fn project(&self, p_cam: &Vec3) -> Vec2 {
        Vec2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Jacobian of [`project`](Self::project) at a camera-frame point.
    pub fn projection_jacobian(&self, p_cam: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p_cam.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p_cam.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p_cam.y * iz2,
        )
    }
}

/// Numerical guards and compositing constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: Vec3,
    /// Camera-frame depth at or below which primitives are culled.
    pub near_clip: f64,
    /// Added to the diagonal of every projected covariance (pixels squared).
    pub dilation: f64,
    pub max_alpha: f64,
    /// Contributions with smaller alpha are skipped.
    pub min_alpha: f64,
    /// Compositing stops once transmittance would fall below this.
    pub min_transmittance: f64,
    /// Screen-space support radius in standard deviations, for tile binning.
    pub extent_sigmas: f64,
}

impl RenderSettings {
    pub fn for_scene(scene: &Scene) -> Self {
        Self::with_near_clip(0.01 * scene.extent)
    }

    pub fn with_near_clip(near_clip: f64) -> Self {
        Self {
            background: Vec3::zeros(),
            near_clip,
            dilation: 0.3,
            max_alpha: 0.99,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
            extent_sigmas: 3.0,
        }
    }

    /// Settings without the alpha skip, early termination or a finite support
    /// radius, so the image is a smooth function of every parameter.
    pub fn smooth(mut self) -> Self {
        self.min_alpha = 0.0;
        self.min_transmittance = 0.0;
        self.extent_sigmas = 1e6;
        self
    }
}

/// A primitive after projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Index of the primitive in its scene.
    pub index: usize,
    pub mean2d: Vec2,
    /// Includes the dilation term.
    pub cov2d: Mat2,
    pub depth: f64,
    /// Alpha at the projected center (the primitive's opacity).
    pub peak_alpha: f64,
    pub cam_point: Vec3,
}

/// Projects `g` into the camera `pose` (world to camera). `None` when culled
/// by the near plane.
pub fn project_gaussian(
    g: &GaussianPrimitive,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Option<ProjectedGaussian> {
    project_with(g, 0, pose, &pose.rotation.matrix(), k, settings, None).map(|s| s.proj)
}

/// The per-pixel inputs of a splat, kept compact for the compositing loops.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    mx: f64,
    my: f64,
    conic: [f64; 3],
    opacity: f64,
    min_power: f64,
    color: Vec3,
}

impl Footprint {
    fn of(s: &Splat) -> Self {
        Self {
            mx: s.proj.mean2d.x,
            my: s.proj.mean2d.y,
            conic: s.conic,
            opacity: s.opacity,
            min_power: s.min_power,
            color: s.color,
        }
    }
}

#[derive(Clone, Debug)]
struct Splat {
    proj: ProjectedGaussian,
    conic: [f64; 3],
    color: Vec3,
    opacity: f64,
    jac: Matrix2x3<f64>,
    /// `J W`, the linear map from world offsets to pixel offsets.
    jw: Matrix2x3<f64>,
    cov3d: Mat3,
    rot: Mat3,
    unit_q: [f64; 4],
    q_norm: f64,
    variance: Vec3,
    tiles: [usize; 4],
    /// Below this exponent the contribution is certainly under `min_alpha`.
    min_power: f64,
}

fn project_with(
    g: &GaussianPrimitive,
    index: usize,
    pose: &Pose,
    view_rot: &Mat3,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    frozen_cov: Option<Mat2>,
) -> Option<Splat> {
    let cam = view_rot * g.mean + pose.translation;
    if cam.z <= settings.near_clip {
        return None;
    }
    let mean2d = k.project(&cam);
    let jac = k.projection_jacobian(&cam);
    let jw = jac * view_rot;

    let [w, x, y, z] = g.rotation;
    let q_norm = (w * w + x * x + y * y + z * z).sqrt();
    let unit_q = [w / q_norm, x / q_norm, y / q_norm, z / q_norm];
    let rot = crate::lie::quaternion_matrix(unit_q);
    let variance = g.log_scale.map(|s| (2.0 * s).exp());
    let cov3d = rot * Mat3::from_diagonal(&variance) * rot.transpose();

    let cov2d = match frozen_cov {
        Some(c) => c,
        None => {
            let c = jw * cov3d * jw.transpose();
            Mat2::new(
                c[(0, 0)] + settings.dilation,
                0.5 * (c[(0, 1)] + c[(1, 0)]),
                0.5 * (c[(0, 1)] + c[(1, 0)]),
                c[(1, 1)] + settings.dilation,
            )
        }
    };
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(0, 1)];
    if !(det > 0.0) || !mean2d.iter().all(|v| v.is_finite()) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let opacity = g.opacity();

    Some(Splat {
        proj: ProjectedGaussian {
            index,
            mean2d,
            cov2d,
            depth: cam.z,
            peak_alpha: opacity,
            cam_point: cam,
        },
        conic,
        color: g.color,
        opacity,
        jac,
        jw,
        cov3d,
        rot,
        unit_q,
        q_norm,
        variance,
        tiles: [0; 4],
        min_power: (settings.min_alpha / opacity).ln() - 1e-9,
    })
}

/// Inclusive tile range `[x0, x1] x [y0, y1]` covered by the support square,
/// or `None` when it misses the image.
fn tile_range(
    s: &Splat,
    k: &CameraIntrinsics,
    tiles_x: usize,
    tiles_y: usize,
    extent_sigmas: f64,
    min_alpha: f64,
) -> Option<[usize; 4]> {
    let c = &s.proj.cov2d;
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let disc = (mid * mid - (c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(0, 1)])).max(0.0);
    let lambda_max = mid + disc.sqrt();
    // Beyond this many sigmas alpha falls under the skip threshold anyway.
    let cutoff = (2.0 * (s.opacity / min_alpha).ln()).max(0.0).sqrt();
    let radius = (extent_sigmas.min(cutoff) * lambda_max.sqrt()).ceil();
    let (mx, my) = (s.proj.mean2d.x, s.proj.mean2d.y);
    let (w, h) = (k.width as f64, k.height as f64);
    if mx + radius < 0.0 || my + radius < 0.0 || mx - radius > w || my - radius > h {
        return None;
    }
    let ts = TILE_SIZE as f64;
    let clamp_tile = |v: f64, n: usize| ((v / ts).floor().max(0.0) as usize).min(n - 1);
    Some([
        clamp_tile(mx - radius, tiles_x),
        clamp_tile(my - radius, tiles_y),
        clamp_tile(mx + radius, tiles_x),
        clamp_tile(my + radius, tiles_y),
    ])
}

/// Intermediates retained by [`render`] for [`backward`].
#[derive(Clone, Debug)]
pub struct RenderGraph {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub settings: RenderSettings,
    scene_len: usize,
    /// Visible primitives, ascending depth.
    splats: Vec<Splat>,
    footprints: Vec<Footprint>,
    /// Per tile: positions into `splats`, ascending depth.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    final_transmittance: Vec<f64>,
    /// Per pixel: number of tile-list entries consumed by compositing.
    n_consumed: Vec<u32>,
    cov_frozen: bool,
}

impl RenderGraph {
    pub fn projected(&self) -> impl Iterator<Item = &ProjectedGaussian> {
        self.splats.iter().map(|s| &s.proj)
    }

    pub fn scene_len(&self) -> usize {
        self.scene_len
    }

    /// Final transmittance per pixel, row-major.
    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_transmittance
    }

    /// Primitive indices for a tile, ascending depth.
    pub fn tile_primitives(&self, tile: usize) -> Vec<usize> {
        self.tiles[tile]
            .iter()
            .map(|&p| self.splats[p as usize].proj.index)
            .collect()
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// Projected covariances by primitive index, for freezing them in a
    /// later [`render_frozen`] call.
    pub fn cov2d_snapshot(&self) -> Vec<Option<Mat2>> {
        let mut out = vec![None; self.scene_len];
        for s in &self.splats {
            out[s.proj.index] = Some(s.proj.cov2d);
        }
        out
    }

    /// Camera-frame depth by primitive index; `None` for culled primitives.
    pub fn depths(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.scene_len];
        for s in &self.splats {
            out[s.proj.index] = Some(s.proj.depth);
        }
        out
    }

    /// Per-pixel blend weights `alpha_i * T_i` of every contributor, in
    /// compositing order.
    pub fn pixel_weights(&self, x: usize, y: usize) -> Vec<(usize, f64)> {
        let w = self.intrinsics.width;
        let tile = (y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE;
        let list = &self.tiles[tile];
        let n = self.n_consumed[y * w + x] as usize;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        let mut out = Vec::new();
        for &pos in &list[..n] {
            let s = &self.footprints[pos as usize];
            if let Some((alpha, _, _)) = splat_alpha(s, px, py, &self.settings) {
                out.push((self.splats[pos as usize].proj.index, alpha * t));
                t *= 1.0 - alpha;
            }
        }
        out
    }
}

/// `(alpha, gaussian falloff, clamped)` at a pixel center, or `None` when
/// the contribution is skipped.
#[inline]
fn splat_alpha(s: &Footprint, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, bool)> {
    let dx = px - s.mx;
    let dy = py - s.my;
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 || power < s.min_power {
        return None;
    }
    let falloff = power.exp();
    let raw = s.opacity * falloff;
    let clamped = raw > settings.max_alpha;
    let alpha = if clamped { settings.max_alpha } else { raw };
    if alpha < settings.min_alpha {
        return None;
    }
    Some((alpha, falloff, clamped))
}

fn build_graph(
    scene: &Scene,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    frozen: Option<&[Option<Mat2>]>,
) -> RenderGraph {
    let view_rot = pose.rotation.matrix();
    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);

    let mut splats: Vec<Splat> = scene
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let frozen_cov = match frozen {
                Some(f) => Some(f.get(i).copied().flatten()?),
                None => None,
            };
            let mut s = project_with(g, i, pose, &view_rot, k, settings, frozen_cov)?;
            s.tiles = tile_range(&s, k, tiles_x, tiles_y, settings.extent_sigmas, settings.min_alpha)?;
            Some(s)
        })
        .collect();
    // Stable: equal depths keep scene order.
    splats.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth));

    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.tiles;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(pos as u32);
            }
        }
    }

    RenderGraph {
        pose: *pose,
        intrinsics: *k,
        settings: *settings,
        scene_len: scene.len(),
        footprints: splats.iter().map(Footprint::of).collect(),
        splats,
        tiles,
        tiles_x,
        final_transmittance: Vec::new(),
        n_consumed: Vec::new(),
        cov_frozen: frozen.is_some(),
    }
}

struct TileForward {
    color: Vec<Vec3>,
    transmittance: Vec<f64>,
    consumed: Vec<u32>,
}

fn tile_pixels(tile: usize, tiles_x: usize, k: &CameraIntrinsics) -> (usize, usize, usize, usize) {
    let x0 = (tile % tiles_x) * TILE_SIZE;
    let y0 = (tile / tiles_x) * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(k.width), (y0 + TILE_SIZE).min(k.height))
}

fn composite(graph: &mut RenderGraph) -> Image {
    let k = graph.intrinsics;
    let settings = graph.settings;
    let tiles_x = graph.tiles_x;
    let splats = &graph.footprints;

    let per_tile: Vec<TileForward> = graph
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (x0, y0, x1, y1) = tile_pixels(tile, tiles_x, &k);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileForward {
                color: Vec::with_capacity(n),
                transmittance: Vec::with_capacity(n),
                consumed: Vec::with_capacity(n),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = Vec3::zeros();
                    let mut consumed = 0;
                    for (j, &pos) in list.iter().enumerate() {
                        let s = &splats[pos as usize];
                        let Some((alpha, _, _)) = splat_alpha(s, px, py, &settings) else {
                            continue;
                        };
                        let next_t = t * (1.0 - alpha);
                        if next_t < settings.min_transmittance {
                            break;
                        }
                        c += s.color * (alpha * t);
                        t = next_t;
                        consumed = j + 1;
                    }
                    c += settings.background * t;
                    out.color.push(c);
                    out.transmittance.push(t);
                    out.consumed.push(consumed as u32);
                }
            }
            out
        })
        .collect();

    let mut image = Image::new(k.width, k.height);
    graph.final_transmittance = vec![0.0; k.width * k.height];
    graph.n_consumed = vec![0; k.width * k.height];
    for (tile, tf) in per_tile.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_pixels(tile, tiles_x, &k);
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                image.set_pixel(x, y, tf.color[i]);
                graph.final_transmittance[y * k.width + x] = tf.transmittance[i];
                graph.n_consumed[y * k.width + x] = tf.consumed[i];
                i += 1;
            }
        }
    }
    image
}

/// Renders `scene` from the world-to-camera `pose`.
pub fn render(
    scene: &Scene,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> (Image, RenderGraph) {
    let mut graph = build_graph(scene, pose, k, settings, None);
    let image = composite(&mut graph);
    (image, graph)
}

/// Renders with projected covariances fixed to `frozen` (by primitive
/// index) instead of recomputing them from the pose. Primitives without a
/// frozen covariance are culled.
pub fn render_frozen(
    scene: &Scene,
    pose: &Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    frozen: &[Option<Mat2>],
) -> (Image, RenderGraph) {
    let mut graph = build_graph(scene, pose, k, settings, Some(frozen));
    let image = composite(&mut graph);
    (image, graph)
}

/// Per-primitive gradients, indexed like the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub mean: Vec<Vec3>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
    /// Gradient with respect to the projected center, in pixels.
    pub mean2d: Vec<Vec2>,
    /// Whether the primitive was projected (not culled) in this view.
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vec3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            mean2d: vec![Vec2::zeros(); n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// `self += weight * other`; visibility is or-ed.
    pub fn add_scaled(&mut self, other: &SceneGradients, weight: f64) {
        for i in 0..self.len() {
            self.mean[i] += other.mean[i] * weight;
            for c in 0..4 {
                self.rotation[i][c] += other.rotation[i][c] * weight;
            }
            self.log_scale[i] += other.log_scale[i] * weight;
            self.opacity_logit[i] += other.opacity_logit[i] * weight;
            self.color[i] += other.color[i] * weight;
            self.mean2d[i] += other.mean2d[i] * weight;
            self.visible[i] |= other.visible[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &Vec<Vec3>| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        v3(&self.mean)
            && v3(&self.log_scale)
            && v3(&self.color)
            && self.rotation.iter().flatten().all(|c| c.is_finite())
            && self.opacity_logit.iter().all(|c| c.is_finite())
            && self.mean2d.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vec2,
    conic: [f64; 3],
    opacity: f64,
    color: Vec3,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Gradients of a scalar loss given `dl_dimage`, the gradient with respect
/// to the rendered image. Returns the Gaussian-parameter gradients and the
/// camera-pose gradient as a left-perturbation twist.
/// Adjoint of [`render`]. The pose gradient follows the projected means
/// only and ignores how the pose changes the projected covariances.
pub fn backward(graph: &RenderGraph, dl_dimage: &Image) -> Result<(SceneGradients, Twist)> {
    backward_with(graph, dl_dimage, false)
}

/// Like [`backward`], but the pose gradient is exact: it also carries the
/// change of every projected covariance, as when the whole scene moves
/// rigidly in front of a fixed camera.
pub fn backward_exact_pose(graph: &RenderGraph, dl_dimage: &Image) -> Result<(SceneGradients, Twist)> {
    backward_with(graph, dl_dimage, true)
}

fn backward_with(graph: &RenderGraph, dl_dimage: &Image, exact_pose: bool) -> Result<(SceneGradients, Twist)> {
    let k = graph.intrinsics;
    if dl_dimage.width() != k.width || dl_dimage.height() != k.height {
        return Err(Error::ShapeMismatch(format!(
            "render graph is {}x{}, image gradient is {}x{}",
            k.width,
            k.height,
            dl_dimage.width(),
            dl_dimage.height()
        )));
    }
    let settings = graph.settings;
    let splats = &graph.splats;
    let bg = settings.background;

    let per_tile: Vec<Vec<SplatGrad>> = graph
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (x0, y0, x1, y1) = tile_pixels(tile, graph.tiles_x, &k);
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * k.width + x;
                    let dl_dc = dl_dimage.pixel(x, y);
                    if dl_dc == Vec3::zeros() {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t_final = graph.final_transmittance[pix];
                    let bg_term = bg.dot(&dl_dc) * t_final;
                    let mut t = t_final;
                    let mut behind = Vec3::zeros();
                    let mut last_alpha = 0.0;
                    let mut last_color = Vec3::zeros();
                    let n = graph.n_consumed[pix] as usize;
                    for j in (0..n).rev() {
                        let s = &graph.footprints[list[j] as usize];
                        let Some((alpha, falloff, clamped)) = splat_alpha(s, px, py, &settings)
                        else {
                            continue;
                        };
                        let one_minus = 1.0 - alpha;
                        t /= one_minus;
                        let g = &mut local[j];
                        g.color += dl_dc * (alpha * t);

                        behind = last_color * last_alpha + behind * (1.0 - last_alpha);
                        last_alpha = alpha;
                        last_color = s.color;
                        if clamped {
                            continue;
                        }
                        let dl_dalpha = (s.color - behind).dot(&dl_dc) * t - bg_term / one_minus;
                        g.opacity += falloff * dl_dalpha;
                        let dl_dpower = s.opacity * falloff * dl_dalpha;
                        let dx = px - s.mx;
                        let dy = py - s.my;
                        let [a, b, c] = s.conic;
                        g.mean2d.x += dl_dpower * (a * dx + b * dy);
                        g.mean2d.y += dl_dpower * (b * dx + c * dy);
                        g.conic[0] += -0.5 * dx * dx * dl_dpower;
                        g.conic[1] += -dx * dy * dl_dpower;
                        g.conic[2] += -0.5 * dy * dy * dl_dpower;
                    }
                }
            }
            local
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    for (list, local) in graph.tiles.iter().zip(&per_tile) {
        for (&pos, g) in list.iter().zip(local) {
            splat_grads[pos as usize].add(g);
        }
    }

    let view_rot = graph.pose.rotation.matrix();
    let chained: Vec<(PrimitiveGrad, PoseTerms)> = splats
        .par_iter()
        .zip(&splat_grads)
        .map(|(s, g)| chain_to_primitive(s, g, &view_rot, &k, graph.cov_frozen))
        .collect();

    let mut grads = SceneGradients::zeros(graph.scene_len);
    let mut pose_grad = Twist::zero();
    for (s, (pg, terms)) in splats.iter().zip(chained) {
        let i = s.proj.index;
        grads.mean[i] = pg.mean;
        grads.rotation[i] = pg.rotation;
        grads.log_scale[i] = pg.log_scale;
        grads.opacity_logit[i] = pg.opacity_logit;
        grads.color[i] = pg.color;
        grads.mean2d[i] = pg.mean2d;
        grads.visible[i] = true;
        // Left perturbation moves a camera-frame point by rho + omega x p.
        let dl_dcam = if exact_pose { terms.full } else { terms.mean_path };
        pose_grad.rho += dl_dcam;
        pose_grad.omega += s.proj.cam_point.cross(&dl_dcam);
        if exact_pose {
            pose_grad.omega += terms.cov_omega;
        }
    }
    Ok((grads, pose_grad))
}

struct PrimitiveGrad {
    mean: Vec3,
    rotation: [f64; 4],
    log_scale: Vec3,
    opacity_logit: f64,
    color: Vec3,
    mean2d: Vec2,
}

/// Pieces of one splat's pose gradient.
struct PoseTerms {
    /// Camera-frame center gradient through the projected mean alone.
    mean_path: Vec3,
    /// Camera-frame center gradient through both the mean and the
    /// projection Jacobian of the covariance.
    full: Vec3,
    /// Rotation gradient from turning the camera-frame covariance.
    cov_omega: Vec3,
}

/// Chains the screen-space gradients of one splat back to its primitive.
fn chain_to_primitive(
    s: &Splat,
    g: &SplatGrad,
    view_rot: &Mat3,
    k: &CameraIntrinsics,
    cov_frozen: bool,
) -> (PrimitiveGrad, PoseTerms) {
    let dl_dcam_mean_path = s.jac.transpose() * g.mean2d;
    let mut dl_dcam = dl_dcam_mean_path;
    let mut log_scale = Vec3::zeros();
    let mut rotation = [0.0; 4];
    let mut cov_omega = Vec3::zeros();

    if !cov_frozen {
        // Conic = inverse(cov2d): dL/dcov2d = -C G C with the conic gradient
        // spread symmetrically over the off-diagonal.
        let [a, b, c] = s.conic;
        let conic = Mat2::new(a, b, b, c);
        let g_conic = Mat2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2d = -(conic * g_conic * conic);

        // cov2d = M cov3d M^T + dilation, M = J W.
        let m = &s.jw;
        let g_cov3d = m.transpose() * g_cov2d * m;
        let g_m = 2.0 * g_cov2d * m * s.cov3d;
        let g_j = g_m * view_rot.transpose();

        let p = &s.proj.cam_point;
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        dl_dcam.x += g_j[(0, 2)] * (-k.fx * iz2);
        dl_dcam.y += g_j[(1, 2)] * (-k.fy * iz2);
        dl_dcam.z += g_j[(0, 0)] * (-k.fx * iz2)
            + g_j[(0, 2)] * (2.0 * k.fx * p.x * iz3)
            + g_j[(1, 1)] * (-k.fy * iz2)
            + g_j[(1, 2)] * (2.0 * k.fy * p.y * iz3);

        // cov3d = R D R^T.
        let d = Mat3::from_diagonal(&s.variance);
        let g_rot = 2.0 * g_cov3d * s.rot * d;
        let g_d = s.rot.transpose() * g_cov3d * s.rot;
        for axis in 0..3 {
            log_scale[axis] = g_d[(axis, axis)] * 2.0 * s.variance[axis];
        }
        rotation = quaternion_grad(&s.unit_q, s.q_norm, &g_rot);

        // Camera-frame covariance turns as (I + [w]x) S (I + [w]x)^T.
        let cov_cam = view_rot * s.cov3d * view_rot.transpose();
        let x = cov_cam * (s.jac.transpose() * g_cov2d * s.jac);
        cov_omega = 2.0 * Vec3::new(x[(1, 2)] - x[(2, 1)], x[(2, 0)] - x[(0, 2)], x[(0, 1)] - x[(1, 0)]);
    }

    let o = s.opacity;
    (
        PrimitiveGrad {
            mean: view_rot.transpose() * dl_dcam,
            rotation,
            log_scale,
            opacity_logit: g.opacity * o * (1.0 - o),
            color: g.color,
            mean2d: g.mean2d,
        },
        PoseTerms {
            mean_path: dl_dcam_mean_path,
            full: dl_dcam,
            cov_omega,
        },
    )
}

/// Pulls a rotation-matrix gradient back to the raw (unnormalized) quaternion.
fn quaternion_grad(q: &[f64; 4], norm: f64, g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let grad = [gw, gx, gy, gz];
    // Through q / |q|: remove the radial component and rescale.
    let radial: f64 = (0..4).map(|i| grad[i] * q[i]).sum();
    [
        (gw - radial * w) / norm,
        (gx - radial * x) / norm,
        (gy - radial * y) / norm,
        (gz - radial * z) / norm,
    ]
}
