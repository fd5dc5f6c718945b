//! Central finite-difference checks of the analytic gradients on seeded
//! random instances.
//!
//! Error measure per checked component: `|a − n| / max(|a|, |n|, floor)`
//! where `floor = FLOOR_FRACTION · max |analytic|` over the instance, so
//! components that are numerically zero do not dominate.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::features::{FeatureExtractor, FeatureKind};
use crate::imagery::{
    norm_to_pixel, pixel_to_norm, ConfidenceMap, ImageBuffer, Keypoint, KeypointSet, Mask, SamplingGrid,
};
use crate::losses::{
    self, ConfidenceGradient, DenseTargets, LossReport, LossWeights, ObjectiveInputs, PairView, Quantity, SmoothMode,
    Stage,
};
use crate::tape::{Activation, NodeId, ParamStore, Tape};
use crate::tensor::{ConvGeometry, Tensor};
use crate::warp;

/// Central-difference step for image, confidence and tensor values.
pub const FD_STEP: f64 = 1e-3;
/// Central-difference step for grid coordinates, in pixels along the
/// component's axis.
pub const FD_STEP_PX: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Minimum distance of any sample position from an integer pixel coordinate.
pub const CELL_MARGIN_PX: f64 = 1e-2;
pub const FLOOR_FRACTION: f64 = 1e-2;
/// Components drawn per differentiated quantity per instance.
pub const COMPONENTS_PER_QUANTITY: usize = 12;
/// Grid components drawn per instance for the sampler check.
pub const SAMPLER_POINTS: usize = 100;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub components: usize,
    pub worst: f64,
}

impl GradCheck {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            components: 0,
            worst: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.instances > 0 && self.worst.is_finite() && self.worst <= FD_TOLERANCE
    }

    /// Folds one instance worth of `(analytic, numeric)` pairs in. `scale` is
    /// the largest analytic magnitude of the instance.
    fn record(&mut self, pairs: &[(f64, f64)], scale: f64) {
        let floor = (FLOOR_FRACTION * scale).max(f64::MIN_POSITIVE);
        for &(a, n) in pairs {
            self.worst = self.worst.max(relative_error(a, n, floor));
        }
        self.components += pairs.len();
        self.instances += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

fn max_abs(t: &Tensor) -> f64 {
    t.data.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Moves a normalized coordinate so its pixel position keeps `margin` px
/// away from every integer.
fn off_cell_boundary(v: f64, n: usize, margin: f64) -> f64 {
    let p = norm_to_pixel(v, n);
    let r = p.round();
    if (p - r).abs() >= margin {
        return v;
    }
    let q = if p >= r { r + margin } else { r - margin };
    pixel_to_norm(q, n)
}

/// Margin used when building instances: the nominal margin plus the largest
/// finite-difference excursion in pixels.
fn build_margin() -> f64 {
    CELL_MARGIN_PX + FD_STEP_PX + 1e-3
}

/// Normalized step for component `i` of a `2 × h × w` grid.
pub fn grid_fd_step(i: usize, height: usize, width: usize) -> f64 {
    let n = if i < height * width { width } else { height };
    FD_STEP_PX * 2.0 / (n as f64 - 1.0)
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageBuffer {
    let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
    ImageBuffer::new(c, h, w, data).expect("values in [0,1]")
}

/// Smooth random warp of the identity, kept off cell boundaries.
fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SamplingGrid {
    let a = [
        1.0 + rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
        1.0 + rng.random_range(-0.15..0.15),
        rng.random_range(-0.15..0.15),
    ];
    let margin = build_margin();
    let n = h * w;
    let mut coords = vec![0f32; 2 * n];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (pixel_to_norm(c as f64, w), pixel_to_norm(r as f64, h));
            let gx = a[0] * x + a[1] * y + a[2] + rng.random_range(-0.05..0.05);
            let gy = a[3] * x + a[4] * y + a[5] + rng.random_range(-0.05..0.05);
            coords[r * w + c] = off_cell_boundary(gx, w, margin) as f32;
            coords[n + r * w + c] = off_cell_boundary(gy, h, margin) as f32;
        }
    }
    SamplingGrid::new(h, w, coords).expect("finite")
}

fn random_conf(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ConfidenceMap {
    ConfidenceMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.05f32..0.95)).collect()).expect("in [0,1]")
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    let data = (0..h * w).map(|_| rng.random_bool(p)).collect();
    Mask::new(h, w, data).expect("sized")
}

/// A random predicted pair with everything the objectives consume.
#[derive(Debug, Clone)]
pub struct PairInstance {
    pub image_s: ImageBuffer,
    pub image_t: ImageBuffer,
    pub grid_st: SamplingGrid,
    pub grid_ts: SamplingGrid,
    pub conf_s: ConfidenceMap,
    pub conf_t: ConfidenceMap,
    pub mask_s: Mask,
    pub mask_t: Mask,
    pub gt_st: SamplingGrid,
    pub gt_ts: SamplingGrid,
    pub vis_s: Mask,
    pub vis_t: Mask,
    pub keypoints: KeypointSet,
}

impl PairInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let h = rng.random_range(8..=16);
        let w = rng.random_range(8..=16);
        let kp = (0..6)
            .map(|i| Keypoint {
                x_src: rng.random_range(0.0..(w - 1) as f32),
                y_src: rng.random_range(0.0..(h - 1) as f32),
                x_tgt: rng.random_range(0.0..(w - 1) as f32),
                y_tgt: rng.random_range(0.0..(h - 1) as f32),
                visible: i != 0,
            })
            .collect();
        Self {
            image_s: random_image(rng, 3, h, w),
            image_t: random_image(rng, 3, h, w),
            grid_st: random_grid(rng, h, w),
            grid_ts: random_grid(rng, h, w),
            conf_s: random_conf(rng, h, w),
            conf_t: random_conf(rng, h, w),
            mask_s: random_mask(rng, h, w, 0.75),
            mask_t: random_mask(rng, h, w, 0.75),
            gt_st: random_grid(rng, h, w),
            gt_ts: random_grid(rng, h, w),
            vis_s: random_mask(rng, h, w, 0.6),
            vis_t: random_mask(rng, h, w, 0.6),
            keypoints: KeypointSet::new(kp),
        }
    }

    pub fn view(&self) -> PairView<'_> {
        PairView {
            image_s: &self.image_s,
            image_t: &self.image_t,
            grid_st: &self.grid_st,
            grid_ts: &self.grid_ts,
            conf_s: &self.conf_s,
            conf_t: &self.conf_t,
            mask_s: &self.mask_s,
            mask_t: &self.mask_t,
        }
    }

    fn perturbed(&self, q: Quantity, i: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let bump_grid = |g: &SamplingGrid| {
            let mut c = g.coords().to_vec();
            c[i] = (c[i] as f64 + delta) as f32;
            SamplingGrid::new(g.height(), g.width(), c).expect("finite")
        };
        let bump_conf = |m: &ConfidenceMap| {
            let mut c = m.data().to_vec();
            c[i] = (c[i] as f64 + delta) as f32;
            ConfidenceMap::new(m.height(), m.width(), c).expect("in range")
        };
        match q {
            Quantity::GridSt => out.grid_st = bump_grid(&self.grid_st),
            Quantity::GridTs => out.grid_ts = bump_grid(&self.grid_ts),
            Quantity::ConfS => out.conf_s = bump_conf(&self.conf_s),
            Quantity::ConfT => out.conf_t = bump_conf(&self.conf_t),
            Quantity::Grid => unreachable!("pair instances have no anonymous grid"),
        }
        out
    }

    /// Exact value of a perturbed component after f32 storage.
    fn stored_step(&self, q: Quantity, i: usize, delta: f64) -> f64 {
        let v = match q {
            Quantity::GridSt => self.grid_st.coords()[i],
            Quantity::GridTs => self.grid_ts.coords()[i],
            Quantity::ConfS => self.conf_s.data()[i],
            Quantity::ConfT => self.conf_t.data()[i],
            Quantity::Grid => unreachable!(),
        } as f64;
        ((v + delta) as f32) as f64
    }
}

/// Compares the analytic gradient of `f` with central differences on
/// randomly drawn components of each quantity in `qs`.
fn check_pair_loss(
    check: &mut GradCheck,
    rng: &mut ChaCha8Rng,
    inst: &PairInstance,
    qs: &[Quantity],
    f: impl Fn(&PairInstance) -> Result<LossReport>,
) -> Result<()> {
    let base = f(inst)?;
    let scale = qs.iter().filter_map(|q| base.grad(*q)).map(max_abs).fold(0.0, f64::max);
    let mut pairs = Vec::new();
    for &q in qs {
        let Some(g) = base.grad(q) else { continue };
        let n = g.data.len();
        for i in sample_indices(rng, n, COMPONENTS_PER_QUANTITY.min(n)) {
            let step = match q {
                Quantity::GridSt | Quantity::GridTs => grid_fd_step(i, inst.image_s.height(), inst.image_s.width()),
                _ => FD_STEP,
            };
            let (up, down) = (inst.perturbed(q, i, step), inst.perturbed(q, i, -step));
            let span = inst.stored_step(q, i, step) - inst.stored_step(q, i, -step);
            let numeric = (f(&up)?.total - f(&down)?.total) / span;
            pairs.push((g.data[i], numeric));
        }
    }
    check.record(&pairs, scale);
    Ok(())
}

/// Bilinear sampler: gradient of `Σ u · W(I, G)` with respect to `G` at
/// [`SAMPLER_POINTS`] random components and to `I` at a dozen.
pub fn check_bilinear_sample(seed: u64, instances: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck::new("bilinear_sample");
    for _ in 0..instances {
        let inst = PairInstance::random(&mut rng);
        let image = inst.image_s.to_tensor();
        let grid = inst.grid_st.to_tensor();
        let up_data = (0..image.channels * grid.plane_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let up = Tensor::from_vec(image.channels, grid.height, grid.width, up_data)?;
        let f = |img: &Tensor, g: &Tensor| -> Result<f64> {
            Ok(warp::sample(img, g)?
                .data
                .iter()
                .zip(&up.data)
                .map(|(a, b)| a * b)
                .sum())
        };
        let (d_img, d_grid) = warp::sample_backward(&image, &grid, &up)?;
        let scale = max_abs(&d_grid).max(max_abs(&d_img));
        let mut pairs = Vec::new();
        let n = grid.data.len();
        for i in sample_indices(&mut rng, n, SAMPLER_POINTS.min(n)) {
            let (mut gp, mut gm) = (grid.clone(), grid.clone());
            let step = grid_fd_step(i, grid.height, grid.width);
            gp.data[i] += step;
            gm.data[i] -= step;
            pairs.push((d_grid.data[i], (f(&image, &gp)? - f(&image, &gm)?) / (2.0 * step)));
        }
        for i in sample_indices(&mut rng, image.data.len(), COMPONENTS_PER_QUANTITY) {
            let (mut ip, mut im) = (image.clone(), image.clone());
            ip.data[i] += FD_STEP;
            im.data[i] -= FD_STEP;
            pairs.push((d_img.data[i], (f(&ip, &grid)? - f(&im, &grid)?) / (2.0 * FD_STEP)));
        }
        check.record(&pairs, scale);
    }
    Ok(check)
}

const PAIR_GRIDS: [Quantity; 2] = [Quantity::GridSt, Quantity::GridTs];
const PAIR_ALL: [Quantity; 4] = [Quantity::GridSt, Quantity::GridTs, Quantity::ConfS, Quantity::ConfT];

/// Every loss term plus the joint stage-iii objective.
pub fn check_losses(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = FeatureExtractor::new(FeatureKind::RandomConv, 3, seed ^ 0x5eed);
    let mut checks: Vec<GradCheck> = [
        "matching",
        "reconstruction",
        "uncertainty",
        "smoothness_displacement",
        "smoothness_literal",
        "dense_supervised",
        "sparse_keypoints",
        "total_objective",
    ]
    .iter()
    .map(|n| GradCheck::new(n))
    .collect();
    let weights = LossWeights::default();
    for _ in 0..instances {
        let inst = PairInstance::random(&mut rng);
        let (h, w) = (inst.image_s.height(), inst.image_s.width());
        check_pair_loss(&mut checks[0], &mut rng, &inst, &PAIR_ALL, |p| {
            losses::loss_matching(
                &p.image_s, &p.image_t, &p.grid_st, &p.grid_ts, &p.conf_s, &p.conf_t, &p.mask_s, &p.mask_t, &extractor,
            )
        })?;
        check_pair_loss(&mut checks[1], &mut rng, &inst, &PAIR_ALL, |p| {
            losses::loss_reconstruction(
                &p.image_s, &p.image_t, &p.grid_st, &p.grid_ts, &p.conf_s, &p.conf_t, &p.mask_s, &p.mask_t,
            )
        })?;
        // references kept at least 0.01 away from the prediction (L1 kink)
        let away = |rng: &mut ChaCha8Rng, c: &ConfidenceMap| {
            let data = c
                .data()
                .iter()
                .map(|&v| {
                    let d = rng.random_range(0.01f32..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let r = v + d;
                    if (0.0..=1.0).contains(&r) {
                        r
                    } else {
                        v - d
                    }
                })
                .collect();
            ConfidenceMap::new(h, w, data).expect("in range")
        };
        let (ref_s, ref_t) = (away(&mut rng, &inst.conf_s), away(&mut rng, &inst.conf_t));
        let lambda = weights.lambda_conf;
        check_pair_loss(
            &mut checks[2],
            &mut rng,
            &inst,
            &[Quantity::ConfS, Quantity::ConfT],
            |p| losses::loss_uncertainty(&ref_s, &ref_t, &p.conf_s, &p.conf_t, &p.mask_s, &p.mask_t, lambda),
        )?;
        for (k, mode) in [(3, SmoothMode::Displacement), (4, SmoothMode::Literal)] {
            check_pair_loss(&mut checks[k], &mut rng, &inst, &[Quantity::GridSt], |p| {
                let mut r = losses::loss_smoothness(&p.grid_st, mode)?;
                if let Some(g) = r.grads.remove(&Quantity::Grid) {
                    r.grads.insert(Quantity::GridSt, g);
                }
                Ok(r)
            })?;
        }
        check_pair_loss(&mut checks[5], &mut rng, &inst, &[Quantity::GridSt], |p| {
            let mut r = losses::loss_dense_supervised(&p.grid_st, &p.gt_st, &p.vis_t)?;
            if let Some(g) = r.grads.remove(&Quantity::Grid) {
                r.grads.insert(Quantity::GridSt, g);
            }
            Ok(r)
        })?;
        check_pair_loss(&mut checks[6], &mut rng, &inst, &PAIR_GRIDS, |p| {
            losses::loss_sparse_keypoints(&p.grid_st, &p.grid_ts, &p.keypoints)
        })?;
        check_pair_loss(&mut checks[7], &mut rng, &inst, &PAIR_ALL, |p| {
            let inputs = ObjectiveInputs {
                pair: p.view(),
                extractor: &extractor,
                dense: Some(DenseTargets {
                    grid_st: &p.gt_st,
                    grid_ts: &p.gt_ts,
                    vis_s: &p.vis_s,
                    vis_t: &p.vis_t,
                }),
                keypoints: Some(&p.keypoints),
                smooth_mode: SmoothMode::Displacement,
                confidence_gradient: ConfidenceGradient::Joint,
            };
            losses::total_objective(Stage::Matching, &inputs, &weights)
        })?;
    }
    Ok(checks)
}

/// Random tensor whose entries keep at least `gap` away from zero.
fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, gap: f64) -> Tensor {
    let data = (0..c * h * w)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(c, h, w, data).expect("sized")
}

type BuildFn = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Finite-difference check of one tape graph: `Σ u · out` against the
/// reverse pass, over sampled input and parameter components.
fn check_graph(
    check: &mut GradCheck,
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    params: &ParamStore,
    build: &BuildFn,
) -> Result<()> {
    let run = |inputs: &[Tensor], params: &ParamStore| -> Result<Tensor> {
        let mut t = Tape::new(params);
        let ids = inputs.iter().map(|x| t.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut t, &ids)?;
        Ok(t.value(out).clone())
    };
    let shape = run(inputs, params)?;
    let up = random_tensor(rng, shape.channels, shape.height, shape.width, 0.0);
    let f = |inputs: &[Tensor], params: &ParamStore| -> Result<f64> {
        Ok(run(inputs, params)?.data.iter().zip(&up.data).map(|(a, b)| a * b).sum())
    };
    let mut t = Tape::new(params);
    let ids = inputs.iter().map(|x| t.input(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut t, &ids)?;
    let g = t.backward(&[(out, &up)])?;

    let mut pairs = Vec::new();
    let mut scale: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = g
            .node(ids[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.channels, x.height, x.width));
        scale = scale.max(max_abs(&analytic));
        for i in sample_indices(rng, x.data.len(), COMPONENTS_PER_QUANTITY.min(x.data.len())) {
            let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
            plus[k].data[i] += FD_STEP;
            minus[k].data[i] -= FD_STEP;
            pairs.push((
                analytic.data[i],
                (f(&plus, params)? - f(&minus, params)?) / (2.0 * FD_STEP),
            ));
        }
    }
    for (k, buf) in params.buffers().iter().enumerate() {
        let analytic = &g.params[k];
        scale = analytic.iter().fold(scale, |m, v| m.max(v.abs()));
        for i in sample_indices(rng, buf.len(), COMPONENTS_PER_QUANTITY.min(buf.len())) {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus.buffers_mut()[k][i] += FD_STEP;
            minus.buffers_mut()[k][i] -= FD_STEP;
            pairs.push((analytic[i], (f(inputs, &plus)? - f(inputs, &minus)?) / (2.0 * FD_STEP)));
        }
    }
    check.record(&pairs, scale);
    Ok(())
}

/// Every tape operator on random 8×8 to 16×16 instances. Activation inputs
/// keep clear of the ReLU kink by more than the step.
pub fn check_tape_ops(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "tape_conv_stride1",
        "tape_conv_stride2",
        "tape_relu",
        "tape_leaky_relu",
        "tape_tanh",
        "tape_sigmoid",
        "tape_upsample",
        "tape_bilinear_sample",
        "tape_add",
        "tape_mul",
        "tape_scale",
        "tape_concat",
        "tape_slice",
    ];
    let mut checks: Vec<GradCheck> = names.iter().map(|n| GradCheck::new(n)).collect();
    let gap = 10.0 * FD_STEP;
    for _ in 0..instances {
        let (h, w) = (rng.random_range(8..=16), rng.random_range(8..=16));
        let c = rng.random_range(1..=3);
        let x = random_tensor(&mut rng, c, h, w, gap);
        let y = random_tensor(&mut rng, c, h, w, gap);
        for (k, stride) in [(0, 1), (1, 2)] {
            let geometry = ConvGeometry {
                in_channels: c,
                out_channels: 2,
                kernel: 3,
                stride,
                pad: 1,
            };
            let mut ps = ParamStore::new();
            let wt = ps.add("w", random_tensor(&mut rng, 1, 1, geometry.weight_len(), 0.0).data);
            let b = ps.add("b", random_tensor(&mut rng, 1, 1, 2, 0.0).data);
            check_graph(
                &mut checks[k],
                &mut rng,
                std::slice::from_ref(&x),
                &ps,
                &move |t, ids| t.conv(ids[0], wt, b, geometry),
            )?;
        }
        let empty = ParamStore::new();
        for (k, kind) in [
            (2, Activation::Relu),
            (3, Activation::LeakyRelu(0.1)),
            (4, Activation::Tanh),
            (5, Activation::Sigmoid),
        ] {
            check_graph(
                &mut checks[k],
                &mut rng,
                std::slice::from_ref(&x),
                &empty,
                &move |t, ids| t.act(ids[0], kind),
            )?;
        }
        check_graph(&mut checks[6], &mut rng, std::slice::from_ref(&x), &empty, &|t, ids| {
            t.upsample(ids[0], 2)
        })?;
        let image = random_image(&mut rng, c, h, w).to_tensor();
        let grid = random_grid(&mut rng, h, w).to_tensor();
        check_graph(&mut checks[7], &mut rng, &[image, grid], &empty, &|t, ids| {
            t.sample(ids[0], ids[1])
        })?;
        check_graph(&mut checks[8], &mut rng, &[x.clone(), y.clone()], &empty, &|t, ids| {
            t.add(ids[0], ids[1])
        })?;
        check_graph(&mut checks[9], &mut rng, &[x.clone(), y.clone()], &empty, &|t, ids| {
            t.mul(ids[0], ids[1])
        })?;
        check_graph(
            &mut checks[10],
            &mut rng,
            std::slice::from_ref(&x),
            &empty,
            &|t, ids| t.scale(ids[0], -1.7),
        )?;
        check_graph(&mut checks[11], &mut rng, &[x.clone(), y.clone()], &empty, &|t, ids| {
            t.concat(&[ids[0], ids[1]])
        })?;
        let z = random_tensor(&mut rng, c + 2, h, w, 0.0);
        check_graph(&mut checks[12], &mut rng, &[z], &empty, &move |t, ids| {
            t.slice(ids[0], 1, c)
        })?;
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 0.1), 0.0);
        assert!((relative_error(0.0, 1e-4, 1e-2) - 1e-2).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0, 0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_nudge_keeps_margin() {
        for n in [8usize, 13, 16] {
            for k in 0..200 {
                let v = -1.1 + 2.2 * k as f64 / 199.0;
                let p = norm_to_pixel(off_cell_boundary(v, n, 0.05), n);
                assert!((p - p.round()).abs() >= 0.05 - 1e-9, "{v} -> {p}");
            }
        }
    }

    #[test]
    fn sampler_gradients_agree() {
        let c = check_bilinear_sample(1, 4).unwrap();
        assert!(c.passed(), "{c:?}");
        assert_eq!(c.components, 4 * (SAMPLER_POINTS + COMPONENTS_PER_QUANTITY));
    }

    #[test]
    fn tape_gradients_agree() {
        let checks = check_tape_ops(3, 3).unwrap();
        assert_eq!(checks.len(), 13);
        for c in checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn loss_gradients_agree() {
        for c in check_losses(2, 3).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
