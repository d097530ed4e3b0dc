//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check scalarises an op's output (a random linear probe, or a loss),
//! computes the analytic gradient through the op's backward, and compares
//! it with central differences at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{
    align_candidate_backward, align_with_orientation, build_affine, extract_cross_sections,
    extract_cross_sections_backward, grid_sample_3d_backward, grid_sample_3d_forward, roi_pool_3d,
    roi_pool_3d_backward, AffineParams, AlignConfig, Orientation,
};
use crate::error::Result;
use crate::nn::conv::{Conv3d, Deconv3d};
use crate::nn::gradcheck::relative_error;
use crate::nn::layers::{relu, relu_backward, Dense, ResidualBlock};
use crate::nn::loss::{bce_with_logit, proposal_loss, smooth_l1, AnchorTerm, LossWeights};
use crate::nn::net::{FpHead, NetConfig, ProposalNet};
use crate::nn::pool::{maxpool3d_backward, maxpool3d_forward};
use crate::nn::Tensor;
use crate::proposal::{location_feature_map, merge_head_grad, split_head, BoxCube};
use crate::volume::Volume;

/// Tolerance for single kernels.
pub const KERNEL_TOLERANCE: f64 = 1e-6;
/// Tolerance for composed graphs.
pub const GRAPH_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`GradcheckOptions::inject_sign_error`].
pub const CHECKS: [&str; 14] = [
    "conv3d",
    "conv3d_strided",
    "deconv3d",
    "maxpool3d",
    "relu",
    "residual_block",
    "dense",
    "grid_sample_3d",
    "roi_pool_3d",
    "cross_sections",
    "bce_loss",
    "smooth_l1",
    "proposal_loss",
    "graph_6",
];

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Negate the analytic gradient of the named check (harness self-test).
    pub inject_sign_error: Option<String>,
    /// Also check the full proposal network composed with alignment and the
    /// classifier at its smallest admissible input (16³).
    pub full_network: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            inject_sign_error: None,
            full_network: true,
        }
    }
}

type T = Tensor<f64>;

/// Central differences of `f` over (a strided subset of) every coordinate of
/// every tensor in `base`, against `analytic`.
fn fd_max(
    base: &[T],
    analytic: &[T],
    h: f64,
    max_coords: usize,
    mut f: impl FnMut(&[T]) -> f64,
) -> (f64, usize) {
    let mut work = base.to_vec();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for t in 0..base.len() {
        let n = base[t].len();
        let step = n.div_ceil(max_coords).max(1);
        for i in (0..n).step_by(step) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            worst = worst.max(relative_error(
                analytic[t].data()[i],
                (up - down) / (2.0 * h),
            ));
            count += 1;
        }
    }
    (worst, count)
}

struct Suite<'a> {
    opts: &'a GradcheckOptions,
    rng: ChaCha8Rng,
    reports: Vec<KernelReport>,
}

impl Suite<'_> {
    fn record(
        &mut self,
        name: &str,
        tolerance: f64,
        base: &[T],
        mut analytic: Vec<T>,
        max_coords: usize,
        f: impl FnMut(&[T]) -> f64,
    ) {
        if self.opts.inject_sign_error.as_deref() == Some(name) {
            for a in &mut analytic {
                a.scale(-1.0);
            }
        }
        let (err, coordinates) = fd_max(base, &analytic, self.opts.step, max_coords, f);
        self.reports.push(KernelReport {
            name: name.to_string(),
            max_rel_error: err,
            tolerance,
            coordinates,
        });
    }

    fn randn(&mut self, shape: &[usize]) -> T {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }
}

fn with_params<L: Clone>(layer: &L, ts: &[T], params_mut: impl Fn(&mut L) -> Vec<&mut T>) -> L {
    let mut l = layer.clone();
    for (d, s) in params_mut(&mut l).into_iter().zip(ts) {
        *d = s.clone();
    }
    l
}

fn check_conv(s: &mut Suite, name: &str, stride: usize) -> Result<()> {
    let conv = Conv3d::<f64>::new(2, 3, 3, stride, 1, 1.0, &mut s.rng);
    let x = s.randn(&[2, 5, 5, 4]);
    let y = conv.forward(&x)?;
    let probe = s.randn(y.shape());
    let mut g = conv.zeros_like();
    let gx = conv.backward(&x, &probe, &mut g)?;
    let base = vec![x, conv.weight.clone(), conv.bias.clone()];
    s.record(
        name,
        KERNEL_TOLERANCE,
        &base,
        vec![gx, g.weight, g.bias],
        400,
        |ts| {
            let c = with_params(&conv, &ts[1..], |c| c.params_mut().into());
            c.forward(&ts[0]).expect("shapes fixed").dot(&probe)
        },
    );
    Ok(())
}

fn check_deconv(s: &mut Suite) -> Result<()> {
    let up = Deconv3d::<f64>::new(3, 2, 2, 2, &mut s.rng);
    let x = s.randn(&[3, 3, 2, 3]);
    let y = up.forward(&x)?;
    let probe = s.randn(y.shape());
    let mut g = up.zeros_like();
    let gx = up.backward(&x, &probe, &mut g)?;
    let base = vec![x, up.weight.clone(), up.bias.clone()];
    s.record(
        "deconv3d",
        KERNEL_TOLERANCE,
        &base,
        vec![gx, g.weight, g.bias],
        400,
        |ts| {
            let u = with_params(&up, &ts[1..], |u| u.params_mut().into());
            u.forward(&ts[0]).expect("shapes fixed").dot(&probe)
        },
    );
    Ok(())
}

fn check_pool_relu(s: &mut Suite) -> Result<()> {
    let x = s.randn(&[2, 4, 6, 5]);
    let p = maxpool3d_forward(&x, 2, 2)?;
    let probe = s.randn(p.output.shape());
    let gx = maxpool3d_backward(x.shape(), &p.argmax, &probe)?;
    s.record("maxpool3d", KERNEL_TOLERANCE, &[x], vec![gx], 400, |ts| {
        maxpool3d_forward(&ts[0], 2, 2)
            .expect("shapes fixed")
            .output
            .dot(&probe)
    });

    let x = s.randn(&[2, 3, 3, 3]);
    let y = relu(&x);
    let probe = s.randn(y.shape());
    let gx = relu_backward(&y, &probe);
    s.record("relu", KERNEL_TOLERANCE, &[x], vec![gx], 400, |ts| {
        relu(&ts[0]).dot(&probe)
    });
    Ok(())
}

fn check_residual(s: &mut Suite) -> Result<()> {
    let block = ResidualBlock::<f64>::new(2, 3, &mut s.rng);
    let x = s.randn(&[2, 4, 4, 3]);
    let c = block.forward(&x)?;
    let probe = s.randn(c.output.shape());
    let mut g = block.zeros_like();
    let gx = block.backward(&x, &c, &probe, &mut g)?;
    let mut base = vec![x];
    base.extend(block.params().into_iter().cloned());
    let mut analytic = vec![gx];
    analytic.extend(g.params().into_iter().cloned());
    s.record(
        "residual_block",
        KERNEL_TOLERANCE,
        &base,
        analytic,
        300,
        |ts| {
            let b = with_params(&block, &ts[1..], |b| b.params_mut());
            b.forward(&ts[0]).expect("shapes fixed").output.dot(&probe)
        },
    );
    Ok(())
}

fn check_dense(s: &mut Suite) -> Result<()> {
    let fc = Dense::<f64>::new(7, 4, 1.0, &mut s.rng);
    let x = s.randn(&[3, 7]);
    let y = fc.forward(&x)?;
    let probe = s.randn(y.shape());
    let mut g = fc.zeros_like();
    let gx = fc.backward(&x, &probe, &mut g)?;
    let mut base = vec![x];
    base.extend(fc.params().into_iter().cloned());
    let mut analytic = vec![gx];
    analytic.extend(g.params().into_iter().cloned());
    s.record("dense", KERNEL_TOLERANCE, &base, analytic, 400, |ts| {
        let d = with_params(&fc, &ts[1..], |d| d.params_mut().into());
        d.forward(&ts[0]).expect("shapes fixed").dot(&probe)
    });
    Ok(())
}

/// A proper rotation with a generic orientation.
fn random_orientation(rng: &mut ChaCha8Rng) -> Orientation {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let r = [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
        ],
        [
            2.0 * (x * y - w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z + w * x),
        ],
        [
            2.0 * (x * z + w * y),
            2.0 * (y * z - w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ];
    Orientation::from_columns(r)
}

fn random_affine(rng: &mut ChaCha8Rng) -> AffineParams {
    let o = random_orientation(rng);
    let t = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    build_affine(&o, t, [0.55, 0.6, 0.5])
}

fn check_alignment_kernels(s: &mut Suite) -> Result<()> {
    let a = random_affine(&mut s.rng);
    let x = s.randn(&[2, 5, 6, 4]);
    let y = grid_sample_3d_forward(&x, &a, [4, 3, 5])?;
    let probe = s.randn(y.shape());
    let gx = grid_sample_3d_backward(&probe, &a, x.spatial())?;
    s.record(
        "grid_sample_3d",
        KERNEL_TOLERANCE,
        &[x],
        vec![gx],
        400,
        |ts| {
            grid_sample_3d_forward(&ts[0], &a, [4, 3, 5])
                .expect("shapes fixed")
                .dot(&probe)
        },
    );

    let x = s.randn(&[2, 9, 8, 7]);
    let p = roi_pool_3d(&x, 3)?;
    let probe = s.randn(p.output.shape());
    let gx = roi_pool_3d_backward(x.shape(), &p.argmax, &probe)?;
    s.record("roi_pool_3d", KERNEL_TOLERANCE, &[x], vec![gx], 400, |ts| {
        roi_pool_3d(&ts[0], 3)
            .expect("shapes fixed")
            .output
            .dot(&probe)
    });

    let x = s.randn(&[2, 5, 5, 5]);
    let y = extract_cross_sections(&x)?;
    let probe = s.randn(y.shape());
    let gx = extract_cross_sections_backward(x.shape(), &probe)?;
    s.record(
        "cross_sections",
        KERNEL_TOLERANCE,
        &[x],
        vec![gx],
        400,
        |ts| {
            extract_cross_sections(&ts[0])
                .expect("shapes fixed")
                .dot(&probe)
        },
    );
    Ok(())
}

fn check_losses(s: &mut Suite) -> Result<()> {
    let z = s.randn(&[6]);
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let g = Tensor::from_vec(
        &[6],
        z.data()
            .iter()
            .zip(labels)
            .map(|(&l, y)| bce_with_logit(l, y).1)
            .collect(),
    )?;
    s.record("bce_loss", KERNEL_TOLERANCE, &[z], vec![g], 100, |ts| {
        ts[0]
            .data()
            .iter()
            .zip(labels)
            .map(|(&l, y)| bce_with_logit(l, y).0)
            .sum()
    });

    // keep every residual away from the |x| = 1 transition
    let t: [f64; 4] = [0.3, -2.0, 1.6, -0.4];
    let target = [0.0, 0.1, -0.2, 0.2];
    let (_, g) = smooth_l1(&t, &target);
    let base = Tensor::from_vec(&[4], t.to_vec())?;
    s.record(
        "smooth_l1",
        KERNEL_TOLERANCE,
        &[base],
        vec![Tensor::from_vec(&[4], g.to_vec())?],
        100,
        |ts| {
            let v: [f64; 4] = std::array::from_fn(|i| ts[0].data()[i]);
            smooth_l1(&v, &target).0
        },
    );

    let n = 8;
    let logits = s.randn(&[n]);
    let deltas = Tensor::from_fn(&[n, 4], |i| 0.2 * ((i * 7 % 11) as f64 - 5.0) / 5.0);
    let terms = [
        AnchorTerm::positive(1, [0.1, -0.2, 0.05, 0.3]),
        AnchorTerm::positive(5, [-0.1, 0.0, 0.2, -0.3]),
        AnchorTerm::negative(0),
        AnchorTerm::negative(3),
        AnchorTerm::negative(6),
    ];
    let w = LossWeights::for_terms(2.0, &terms);
    let to_rows = |t: &T| -> Vec<[f64; 4]> {
        t.data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect()
    };
    let l = proposal_loss(logits.data(), &to_rows(&deltas), &terms, &w)?;
    let gl = Tensor::from_vec(&[n], l.grad_logits.clone())?;
    let gd = Tensor::from_vec(&[n, 4], l.grad_deltas.iter().flatten().copied().collect())?;
    s.record(
        "proposal_loss",
        KERNEL_TOLERANCE,
        &[logits, deltas],
        vec![gl, gd],
        100,
        |ts| {
            proposal_loss(ts[0].data(), &to_rows(&ts[1]), &terms, &w)
                .expect("fixture valid")
                .total
        },
    );
    Ok(())
}

/// A miniature of the detector on a 6³ input: stem conv, pooling, a residual
/// stage, upsampling with a skip, the proposal head and loss, and two
/// aligned candidates through pooling, cross sections and the classifier.
#[derive(Clone)]
struct MiniGraph {
    stem: Conv3d<f64>,
    res: ResidualBlock<f64>,
    up: Deconv3d<f64>,
    dec: ResidualBlock<f64>,
    head: Conv3d<f64>,
    fp: FpHead<f64>,
    affines: [AffineParams; 2],
    terms: Vec<AnchorTerm>,
}

impl MiniGraph {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let stem = Conv3d::same(1, 2, 3, 1.0, rng);
        let res = ResidualBlock::new(2, 2, rng);
        let up = Deconv3d::new(2, 2, 2, 2, rng);
        let dec = ResidualBlock::new(4, 3, rng);
        let head = Conv3d::same(3, 5, 1, 1.0, rng);
        let fp = FpHead::new(3 * 3 * 2 * 2, 4, rng);
        let affines = [random_affine(rng), random_affine(rng)];
        let terms = vec![
            AnchorTerm::positive(10, [0.1, -0.3, 0.2, 0.05]),
            AnchorTerm::positive(100, [-0.2, 0.1, 0.0, -0.1]),
            AnchorTerm::negative(3),
            AnchorTerm::negative(50),
            AnchorTerm::negative(150),
            AnchorTerm::negative(200),
        ];
        Self {
            stem,
            res,
            up,
            dec,
            head,
            fp,
            affines,
            terms,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = self.stem.params_mut().into();
        v.extend(self.res.params_mut());
        v.extend(self.up.params_mut());
        v.extend(self.dec.params_mut());
        v.extend(self.head.params_mut());
        v.extend(self.fp.params_mut());
        v
    }

    fn params(&mut self) -> Vec<T> {
        self.params_mut().into_iter().map(|t| t.clone()).collect()
    }

    /// Loss and, when `grads` is given, the input gradient plus parameter
    /// gradients accumulated into `grads`.
    fn run(&self, x: &T, grads: Option<&mut MiniGraph>) -> Result<(f64, Option<T>)> {
        let a = relu(&self.stem.forward(x)?);
        let p = maxpool3d_forward(&a, 2, 2)?;
        let r = self.res.forward(&p.output)?;
        let u = relu(&self.up.forward(&r.output)?);
        let cat = Tensor::concat_channels(&[&u, &a])?;
        let d = self.dec.forward(&cat)?;
        let out = self.head.forward(&d.output)?;
        let (logits, deltas) = split_head(&out, 1)?;
        let w = LossWeights::for_terms(1.5, &self.terms);
        let pl = proposal_loss(&logits, &deltas, &self.terms, &w)?;

        let mut sampled = Vec::new();
        let mut pooled = Vec::new();
        let mut rows = Vec::new();
        for aff in &self.affines {
            let sm = grid_sample_3d_forward(&d.output, aff, [4, 4, 4])?;
            let pm = roi_pool_3d(&sm, 2)?;
            rows.extend_from_slice(extract_cross_sections(&pm.output)?.data());
            sampled.push(sm);
            pooled.push(pm);
        }
        let xf = Tensor::from_vec(&[2, self.fp.inputs()], rows)?;
        let fc = self.fp.forward(&xf)?;
        let labels = [1.0, 0.0];
        let mut fp_loss = 0.0;
        let mut g_logit = Vec::new();
        for (i, y) in labels.iter().enumerate() {
            let (l, g) = bce_with_logit(fc.logits.data()[i], *y);
            fp_loss += l / 2.0;
            g_logit.push(g / 2.0);
        }
        let total = pl.total + fp_loss;
        let Some(g) = grads else {
            return Ok((total, None));
        };

        let g_out: T = merge_head_grad(&pl.grad_logits, &pl.grad_deltas, 1, out.spatial());
        let mut g_d = self.head.backward(&d.output, &g_out, &mut g.head)?;
        let gx_fp = self
            .fp
            .backward(&fc, &Tensor::from_vec(&[2, 1], g_logit)?, &mut g.fp)?;
        let row = self.fp.inputs();
        for k in 0..2 {
            let gs = Tensor::from_vec(&[9, 2, 2], gx_fp.data()[k * row..(k + 1) * row].to_vec())?;
            let gp = extract_cross_sections_backward(pooled[k].output.shape(), &gs)?;
            let gsm = roi_pool_3d_backward(sampled[k].shape(), &pooled[k].argmax, &gp)?;
            g_d.axpy(
                1.0,
                &grid_sample_3d_backward(&gsm, &self.affines[k], d.output.spatial())?,
            )?;
        }
        let g_cat = self.dec.backward(&cat, &d, &g_d, &mut g.dec)?;
        let mut parts = g_cat.split_channels(&[2, 2])?;
        let mut g_a = parts.pop().expect("two parts");
        let g_u = relu_backward(&u, &parts[0]);
        let g_r = self.up.backward(&r.output, &g_u, &mut g.up)?;
        let g_p = self.res.backward(&p.output, &r, &g_r, &mut g.res)?;
        g_a.axpy(1.0, &maxpool3d_backward(a.shape(), &p.argmax, &g_p)?)?;
        let g_a = relu_backward(&a, &g_a);
        let gx = self.stem.backward(x, &g_a, &mut g.stem)?;
        Ok((total, Some(gx)))
    }

    fn zeros_like(&self) -> Self {
        Self {
            stem: self.stem.zeros_like(),
            res: self.res.zeros_like(),
            up: self.up.zeros_like(),
            dec: self.dec.zeros_like(),
            head: self.head.zeros_like(),
            fp: self.fp.zeros_like(),
            affines: self.affines,
            terms: self.terms.clone(),
        }
    }
}

fn check_mini_graph(s: &mut Suite) -> Result<()> {
    let mut g = MiniGraph::new(&mut s.rng);
    let x = s.randn(&[1, 6, 6, 6]);
    let mut grads = g.zeros_like();
    let (_, gx) = g.run(&x, Some(&mut grads))?;
    let mut base = vec![x];
    base.extend(g.params());
    let mut analytic = vec![gx.expect("gradient requested")];
    analytic.extend(grads.params());
    let template = g.clone();
    s.record("graph_6", GRAPH_TOLERANCE, &base, analytic, 60, |ts| {
        let mut m = template.clone();
        for (d, src) in m.params_mut().into_iter().zip(&ts[1..]) {
            *d = src.clone();
        }
        m.run(&ts[0], None).expect("shapes fixed").0
    });
    Ok(())
}

/// The real proposal network (tiny widths, 16³ input) composed with vessel
/// alignment of two candidates and the classifier, under both losses.
fn check_full_network(s: &mut Suite) -> Result<()> {
    let cfg = NetConfig {
        widths: [2, 2, 3, 3, 4, 4],
        n_scales: 2,
        head_hidden: 4,
        fp_hidden: 3,
    };
    let align = AlignConfig {
        feature_extent: 6,
        roi_size: 3,
        ..AlignConfig::default()
    };
    let net = ProposalNet::<f64>::new(&cfg, &mut s.rng);
    let fp = FpHead::<f64>::new(3 * cfg.feature_channels() * 9, cfg.fp_hidden, &mut s.rng);
    let x = s.randn(&[1, 16, 16, 16]);
    let vol = Volume::new(
        [16; 3],
        [1.0; 3],
        [0.0; 3],
        x.data().iter().map(|&v| v as f32).collect(),
    )?;
    let loc = location_feature_map([0, 0, 0], [4, 4, 4], [16, 16, 16], 4);
    let cubes = [
        BoxCube::new([7.0, 8.5, 6.0], 6.0),
        BoxCube::new([9.5, 6.0, 8.0], 8.0),
    ];
    let orients = [
        random_orientation(&mut s.rng),
        random_orientation(&mut s.rng),
    ];
    let terms = vec![
        AnchorTerm::positive(7, [0.1, 0.2, -0.1, 0.0]),
        AnchorTerm::negative(20),
        AnchorTerm::negative(90),
    ];

    let run = |net: &ProposalNet<f64>,
               fp: &FpHead<f64>,
               grads: Option<(&mut ProposalNet<f64>, &mut FpHead<f64>)>|
     -> Result<f64> {
        let c = net.forward(&x, &loc)?;
        let (logits, deltas) = split_head(&c.output, 2)?;
        let w = LossWeights::for_terms(1.0, &terms);
        let pl = proposal_loss(&logits, &deltas, &terms, &w)?;
        let aligned: Vec<_> = cubes
            .iter()
            .zip(&orients)
            .map(|(cube, o)| align_with_orientation(&vol, &c.features, cube, o, &align))
            .collect::<Result<_>>()?;
        let rows: Vec<f64> = aligned
            .iter()
            .flat_map(|a| a.sections.data().to_vec())
            .collect();
        let fc = fp.forward(&Tensor::from_vec(&[2, fp.inputs()], rows)?)?;
        let (l0, g0) = bce_with_logit(fc.logits.data()[0], 1.0);
        let (l1, g1) = bce_with_logit(fc.logits.data()[1], 0.0);
        let total = pl.total + (l0 + l1) / 2.0;
        if let Some((gn, gf)) = grads {
            let gx = fp.backward(
                &fc,
                &Tensor::from_vec(&[2, 1], vec![g0 / 2.0, g1 / 2.0])?,
                gf,
            )?;
            let mut g_feat = Tensor::zeros(c.features.shape());
            let row = fp.inputs();
            for (k, a) in aligned.iter().enumerate() {
                let gs = Tensor::from_vec(
                    a.sections.shape(),
                    gx.data()[k * row..(k + 1) * row].to_vec(),
                )?;
                align_candidate_backward(a, &gs, &mut g_feat)?;
            }
            let g_out = merge_head_grad(&pl.grad_logits, &pl.grad_deltas, 2, c.output.spatial());
            net.backward(&c, &g_out, Some(&g_feat), gn)?;
        }
        Ok(total)
    };
    let mut gn = net.zeros_like();
    let mut gf = fp.zeros_like();
    run(&net, &fp, Some((&mut gn, &mut gf)))?;
    let n_net = net.params().len();
    let base: Vec<T> = net
        .params()
        .into_iter()
        .chain(fp.params())
        .cloned()
        .collect();
    let analytic: Vec<T> = gn
        .params()
        .into_iter()
        .chain(gf.params())
        .cloned()
        .collect();
    s.record("graph_full", GRAPH_TOLERANCE, &base, analytic, 4, |ts| {
        let mut n2 = net.clone();
        for (d, src) in n2.params_mut().into_iter().zip(&ts[..n_net]) {
            *d = src.clone();
        }
        let mut f2 = fp.clone();
        for (d, src) in f2.params_mut().into_iter().zip(&ts[n_net..]) {
            *d = src.clone();
        }
        run(&n2, &f2, None).expect("shapes fixed")
    });
    Ok(())
}

/// Run every check; the report order is fixed.
pub fn gradcheck_suite(opts: &GradcheckOptions) -> Result<Vec<KernelReport>> {
    let mut s = Suite {
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        reports: Vec::new(),
    };
    check_conv(&mut s, "conv3d", 1)?;
    check_conv(&mut s, "conv3d_strided", 2)?;
    check_deconv(&mut s)?;
    check_pool_relu(&mut s)?;
    check_residual(&mut s)?;
    check_dense(&mut s)?;
    check_alignment_kernels(&mut s)?;
    check_losses(&mut s)?;
    check_mini_graph(&mut s)?;
    if opts.full_network {
        check_full_network(&mut s)?;
    }
    Ok(s.reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_catches_sign_errors() {
        let opts = GradcheckOptions {
            full_network: false,
            ..Default::default()
        };
        let r = gradcheck_suite(&opts).unwrap();
        assert_eq!(r.len(), CHECKS.len());
        for k in &r {
            assert!(k.passed(), "{} {}", k.name, k.max_rel_error);
        }
        let bad = GradcheckOptions {
            inject_sign_error: Some("roi_pool_3d".into()),
            ..opts
        };
        let r = gradcheck_suite(&bad).unwrap();
        assert!(r.iter().any(|k| k.name == "roi_pool_3d" && !k.passed()));
    }
}
