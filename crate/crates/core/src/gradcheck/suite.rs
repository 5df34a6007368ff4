//! Named gradient checks for every differentiable op and for the
//! end-to-end module and network graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_graph, CheckOutcome, GraphFn};
use crate::autodiff::{Tape, Var};
use crate::data::{synth_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::learn::{total_loss, Batch};
use crate::network::{init_params, pfnet_forward, NetworkConfig, ParamVars};
use crate::nn::{ConvGeometry, NormalizedPoint};
use crate::pointflow::{
    boundary_branch, compute_saliency, pfm_forward, point_propagate, salient_match, Direction, PfmConfig, PfmParams,
};
use crate::tensor::Tensor;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub graph: Box<GraphFn<'static>>,
    /// Coordinates probed per input.
    pub max_probes: usize,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub outcome: CheckOutcome,
}

struct Gen {
    seed: u64,
    next: u64,
    rng: ChaCha8Rng,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Self { seed, next: 0, rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED) }
    }

    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.next += 1;
        Tensor::uniform(shape, self.seed.wrapping_mul(1_000_003).wrapping_add(self.next), -1.0, 1.0)
            .expect("valid shape")
    }

    /// Values at least 0.1 away from zero, clear of the relu kink.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape).map(|x| x.signum() * (0.1 + x.abs()))
    }

    fn points(&mut self, k: usize) -> Vec<NormalizedPoint> {
        (0..k).map(|_| NormalizedPoint::new(self.rng.gen_range(0.0..1.0), self.rng.gen_range(0.0..1.0))).collect()
    }

    fn grid_points(&mut self, k: usize, h: usize, w: usize) -> Vec<NormalizedPoint> {
        rand::seq::index::sample(&mut self.rng, h * w, k)
            .into_iter()
            .map(|i| NormalizedPoint::from_flat(i, h, w))
            .collect()
    }
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, graph: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { name, inputs, graph: Box::new(graph), max_probes: 24 }
}

fn pfm_case(name: &'static str, g: &mut Gen, cfg: PfmConfig, pick: fn(&crate::pointflow::PfmOutput) -> Option<Var>) -> GradCase {
    let inputs = vec![
        g.uniform(&[2, 3, 4, 4]),
        g.uniform(&[2, 3, 8, 8]),
        g.uniform(&[1, 6, 3, 3]),
        g.uniform(&[1]),
        g.uniform(&[1, 3, 1, 1]),
        g.uniform(&[1]),
    ];
    let graph = move |t: &mut Tape<f64>, v: &[Var]| {
        let params = PfmParams { saliency_weight: v[2], saliency_bias: v[3], boundary: Some((v[4], v[5])) };
        let out = pfm_forward(t, v[0], v[1], &cfg, &params, 0)?;
        pick(&out).ok_or_else(|| Error::arg("gradcheck", "selected output is absent"))
    };
    GradCase { name, inputs, graph: Box::new(graph), max_probes: 12 }
}

fn tiny_network() -> NetworkConfig {
    NetworkConfig { fpn_channels: 4, backbone_channels: [2, 2, 4, 4], num_classes: 3, ..Default::default() }
}

fn network_case(name: &'static str, seed: u64, with_loss: bool) -> Result<GradCase> {
    let cfg = tiny_network();
    let scene = synth_scene(
        &SceneConfig { canvas: (64, 64), num_classes: 3, target_fg_ratio: 0.1, seed, ..Default::default() },
        0,
    )?;
    let batch = Batch::from_samples(&[(&scene.image, &scene.mask)], 1)?;
    let edges: Vec<(usize, Tensor<f64>)> = batch.edges.iter().map(|(g, t)| (*g, t.cast())).collect();
    let labels = batch.labels.clone();
    let params = init_params::<f64>(&cfg, seed)?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let mut inputs = vec![batch.images.cast::<f64>()];
    // Zero biases at initialization leave dead regions with exactly tied
    // boundary scores, where top-K is discontinuous; jitter moves off them.
    for (i, t) in params.tensors.into_values().enumerate() {
        let jitter = Tensor::<f64>::uniform(t.shape(), seed ^ (i as u64) << 20, -0.1, 0.1)?;
        inputs.push(Tensor::from_vec(t.shape(), t.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect())?);
    }
    let graph = move |t: &mut Tape<f64>, v: &[Var]| {
        let p: ParamVars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let out = pfnet_forward(t, &p, v[0], &cfg, 0)?;
        if with_loss {
            Ok(total_loss(t, &out, &labels, &edges, 1.0, 1.0, (64, 64))?.0)
        } else {
            Ok(out.logits)
        }
    };
    Ok(GradCase { name, inputs, graph: Box::new(graph), max_probes: 2 })
}

/// Every case, with inputs drawn from `seed`.
pub fn suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut g = Gen::new(seed);
    let pts = g.points(7);
    let scatter_pts = g.grid_points(6, 5, 6);
    let labels: Vec<u8> = (0..2 * 5 * 4).map(|i| if i % 11 == 3 { 255 } else { (i * 7 % 4) as u8 }).collect();
    let bce_target = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| f64::from(u8::from(i % 3 == 0))).collect())?;
    let pp_pts = g.grid_points(5, 4, 4);

    let pfm_small = PfmConfig { salient_kernel: (2, 2), boundary_k: 4, ..Default::default() };
    let cases = vec![
        case("relu", vec![g.off_zero(&[3, 4])], |t, v| t.relu(v[0])),
        case("sigmoid", vec![g.uniform(&[3, 4])], |t, v| t.sigmoid(v[0])),
        case("exp", vec![g.uniform(&[3, 4])], |t, v| t.exp(v[0])),
        case("neg", vec![g.uniform(&[3, 4])], |t, v| t.neg(v[0])),
        case("add", vec![g.uniform(&[2, 3, 2, 2]), g.uniform(&[2, 3, 2, 2])], |t, v| t.add(v[0], v[1])),
        case("add.per_channel", vec![g.uniform(&[2, 3, 2, 2]), g.uniform(&[1, 3, 1, 1])], |t, v| t.add(v[0], v[1])),
        case("sub", vec![g.uniform(&[2, 3]), g.uniform(&[2, 3])], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![g.uniform(&[2, 3, 2, 2]), g.uniform(&[2, 3, 2, 2])], |t, v| t.mul(v[0], v[1])),
        case("mul.spatial", vec![g.uniform(&[2, 3, 2, 2]), g.uniform(&[2, 1, 2, 2])], |t, v| t.mul(v[0], v[1])),
        case("scale", vec![g.uniform(&[4])], |t, v| t.scale(v[0], -2.5)),
        case("matmul", vec![g.uniform(&[3, 4]), g.uniform(&[4, 2])], |t, v| t.matmul(v[0], v[1])),
        case("transpose", vec![g.uniform(&[3, 4])], |t, v| t.transpose(v[0])),
        case("softmax_rows", vec![g.uniform(&[3, 5])], |t, v| t.softmax_rows(v[0])),
        case("concat_channels", vec![g.uniform(&[2, 2, 3, 3]), g.uniform(&[2, 1, 3, 3])], |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        case("sum", vec![g.uniform(&[3, 4])], |t, v| t.sum(v[0])),
        case("mean", vec![g.uniform(&[3, 4])], |t, v| t.mean(v[0])),
        case("conv2d.3x3", vec![g.uniform(&[2, 3, 5, 4]), g.uniform(&[2, 3, 3, 3]), g.uniform(&[2])], |t, v| {
            t.conv2d(v[0], v[1], v[2], ConvGeometry::SAME3)
        }),
        case("conv2d.3x3_stride2", vec![g.uniform(&[2, 3, 6, 5]), g.uniform(&[2, 3, 3, 3]), g.uniform(&[2])], |t, v| {
            t.conv2d(v[0], v[1], v[2], ConvGeometry::DOWN3)
        }),
        case("conv2d.1x1", vec![g.uniform(&[2, 3, 4, 4]), g.uniform(&[2, 3, 1, 1]), g.uniform(&[2])], |t, v| {
            t.conv2d(v[0], v[1], v[2], ConvGeometry::POINT)
        }),
        case("channel_norm", vec![g.uniform(&[2, 3, 3, 2]), g.uniform(&[3]), g.uniform(&[3])], |t, v| {
            t.channel_norm(v[0], v[1], v[2])
        }),
        case("adaptive_max_pool", vec![g.uniform(&[2, 2, 7, 5])], |t, v| Ok(t.adaptive_max_pool(v[0], 3, 2)?.0)),
        case("adaptive_avg_pool", vec![g.uniform(&[2, 2, 7, 5])], |t, v| t.adaptive_avg_pool(v[0], 3, 2)),
        case("box_avg_pool", vec![g.uniform(&[2, 1, 5, 4])], |t, v| t.box_avg_pool(v[0], 3)),
        case("bilinear_resize.up", vec![g.uniform(&[2, 2, 3, 4])], |t, v| t.bilinear_resize(v[0], 6, 8)),
        case("bilinear_resize.down", vec![g.uniform(&[2, 2, 8, 6])], |t, v| t.bilinear_resize(v[0], 3, 4)),
        case("bilinear_point_sample", vec![g.uniform(&[2, 3, 5, 6])], move |t, v| t.bilinear_point_sample(v[0], 1, &pts)),
        case("scatter_points", vec![g.uniform(&[2, 3, 5, 6]), g.uniform(&[6, 3])], move |t, v| {
            t.scatter_points(v[0], 0, &scatter_pts, v[1])
        }),
        case("bce_loss", vec![g.uniform(&[2, 1, 3, 3])], move |t, v| {
            let p = t.sigmoid(v[0])?;
            t.bce_loss(p, &bce_target)
        }),
        case("ce_loss", vec![g.uniform(&[2, 4, 5, 4])], move |t, v| t.ce_loss(v[0], &labels)),
        case(
            "compute_saliency",
            vec![g.uniform(&[2, 3, 4, 4]), g.uniform(&[2, 3, 8, 8]), g.uniform(&[1, 6, 3, 3]), g.uniform(&[1])],
            |t, v| compute_saliency(t, v[0], v[1], v[2], v[3]),
        ),
        case("salient_match", vec![g.uniform(&[2, 3, 6, 6]), g.uniform(&[2, 1, 6, 6])], move |t, v| {
            let m = t.sigmoid(v[1])?;
            let cfg = PfmConfig { salient_kernel: (2, 3), ..Default::default() };
            Ok(salient_match(t, v[0], m, &cfg, 0)?.0)
        }),
        case(
            "boundary_branch",
            vec![g.uniform(&[2, 3, 4, 4]), g.uniform(&[2, 1, 4, 4]), g.uniform(&[1, 3, 1, 1]), g.uniform(&[1])],
            |t, v| {
                let m = t.sigmoid(v[1])?;
                let cfg = PfmConfig { boundary_k: 3, ..Default::default() };
                Ok(boundary_branch(t, v[0], m, v[2], v[3], &cfg)?.0)
            },
        ),
        case("point_propagate", vec![g.uniform(&[2, 3, 4, 4]), g.uniform(&[2, 3, 8, 8])], move |t, v| {
            point_propagate(t, v[0], v[1], 1, &pp_pts, 0.7)
        }),
        pfm_case("pfm_forward", &mut g, pfm_small.clone(), |o| Some(o.refined)),
        pfm_case("pfm_forward.boundary_map", &mut g, pfm_small.clone(), |o| o.boundary_map),
        pfm_case(
            "pfm_forward.bottom_up",
            &mut g,
            PfmConfig { direction: Direction::BottomUp, ..pfm_small.clone() },
            |o| Some(o.refined_upper),
        ),
        pfm_case(
            "pfm_forward.td_then_bu",
            &mut g,
            PfmConfig { direction: Direction::TdThenBu, ..pfm_small },
            |o| Some(o.refined_upper),
        ),
        network_case("pfnet_forward", seed, false)?,
        network_case("pfnet_forward.loss", seed, true)?,
    ];
    Ok(cases)
}

/// Scope of a deliberately wrong adjoint, kept out of `"all"`; checking it
/// must fail.
pub const CORRUPTED_FIXTURE: &str = "fixture.corrupted_square";

/// `x²` whose recorded adjoint lacks the factor 2.
pub fn corrupted_square(seed: u64) -> GradCase {
    let mut g = Gen::new(seed);
    case(CORRUPTED_FIXTURE, vec![g.uniform(&[5])], |t, v| {
        let out = t.value(v[0]).map(|a| a * a);
        t.record(
            "corrupted_square",
            out,
            &[v[0]],
            Box::new(|ctx| {
                let d = ctx.grad.data().iter().zip(ctx.inputs[0].data()).map(|(g, a)| g * a).collect();
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), d).expect("same shape"))]
            }),
        )
    })
}

/// Runs every case whose name equals `scope` or starts with `scope.`;
/// `"all"` selects everything.
pub fn run_suite(scope: &str, seeds: &[u64]) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let cases = if scope == CORRUPTED_FIXTURE { vec![corrupted_square(seed)] } else { suite(seed)? };
        for c in cases {
            let selected = scope == "all" || c.name == scope || c.name.strip_prefix(scope).is_some_and(|r| r.starts_with('.'));
            if !selected {
                continue;
            }
            let outcome = check_graph(&*c.graph, &c.inputs, seed, c.max_probes)?;
            out.push(CaseResult { name: c.name, seed, outcome });
        }
    }
    Ok(out)
}

/// Names of every case in suite order.
pub fn case_names() -> Vec<&'static str> {
    suite(0).map(|s| s.iter().map(|c| c.name).collect()).unwrap_or_default()
}
