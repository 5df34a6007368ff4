//! The segmentation network: a small strided backbone, a pyramid pooling
//! head on the deepest stage, a channel-aligned feature pyramid whose
//! top-down gaps use point-flow modules, and a fused 1/4-resolution
//! classifier.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvGeometry, NormalizedPoint};
use crate::pointflow::{pfm_forward, PfmConfig, PfmParams, PointSet};
use crate::tensor::{Real, Tensor};

/// Pyramid levels F2..F5 and their strides.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];
/// Gaps are named by their coarse level: gap `l` sits between F_l and F_{l-1}.
pub const GAPS: [usize; 3] = [3, 4, 5];
pub const BOUNDARY_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    pub fpn_channels: usize,
    /// Output channels of the four backbone stages; the stem uses the first.
    pub backbone_channels: [usize; 4],
    pub ppm_bins: Vec<usize>,
    pub use_ppm: bool,
    /// Module settings for gaps 3, 4 and 5.
    pub pfm: [PfmConfig; 3],
    pub pfm_enabled_gaps: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            in_channels: 3,
            num_classes: 6,
            fpn_channels: 64,
            backbone_channels: [16, 32, 64, 128],
            ppm_bins: vec![1, 2, 3, 6],
            use_ppm: true,
            pfm: [PfmConfig::default(), PfmConfig::default(), PfmConfig::default()],
            pfm_enabled_gaps: GAPS.to_vec(),
        }
    }
}

impl NetworkConfig {
    /// The plain feature-pyramid arm: no point flow, no pooling head.
    pub fn plain_fpn(&self) -> Self {
        Self { use_ppm: false, pfm_enabled_gaps: Vec::new(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::arg("network", format!("input {h}x{w} must be a positive multiple of 32")));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.fpn_channels == 0 {
            return Err(Error::arg("network", "need at least two classes and non-zero channel counts"));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::arg("network", "backbone stage with zero channels"));
        }
        if self.use_ppm && (self.ppm_bins.is_empty() || self.ppm_bins.contains(&0)) {
            return Err(Error::arg("network", "pooling bins must be positive"));
        }
        if let Some(g) = self.pfm_enabled_gaps.iter().find(|g| !GAPS.contains(g)) {
            return Err(Error::arg("network", format!("unknown gap {g}; gaps are 3, 4, 5")));
        }
        for cfg in &self.pfm {
            let (kh, kw) = cfg.salient_kernel;
            if kh == 0 || kw == 0 {
                return Err(Error::arg("network", "salient kernel must be at least 1x1"));
            }
        }
        Ok(())
    }

    pub fn gap_enabled(&self, gap: usize) -> bool {
        self.pfm_enabled_gaps.contains(&gap)
    }

    pub fn pfm_for(&self, gap: usize) -> &PfmConfig {
        &self.pfm[gap - 3]
    }

    /// Spatial size of level `l` for the configured input.
    pub fn level_size(&self, l: usize) -> (usize, usize) {
        (self.input_size.0 >> l, self.input_size.1 >> l)
    }

    /// Module settings of `gap` with point budgets fitted to its coarse level.
    pub fn effective_pfm(&self, gap: usize) -> PfmConfig {
        let (h, w) = self.level_size(gap);
        self.pfm_for(gap).fitted(h, w)
    }

    fn stage_channels(&self, l: usize) -> usize {
        self.backbone_channels[l - 2]
    }

    fn ppm_branch_channels(&self) -> usize {
        (self.fpn_channels / 4).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    Scaled { fan_in: usize },
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize, bias_init: f64) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::Scaled { fan_in: cin * k * k },
    });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Const(bias_init) });
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![c], init: Init::Const(1.0) });
    out.push(ParamSpec { name: format!("{name}.beta"), shape: vec![c], init: Init::Const(0.0) });
}

/// Every learnable tensor the configuration uses, in a fixed order.
pub fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let c = cfg.fpn_channels;
    let c0 = cfg.backbone_channels[0];
    conv_specs(&mut s, "backbone.stem.conv", cfg.in_channels, c0, 3, 0.0);
    norm_specs(&mut s, "backbone.stem.norm", c0);
    let mut cin = c0;
    for l in LEVELS {
        let co = cfg.stage_channels(l);
        let p = format!("backbone.stage{l}");
        conv_specs(&mut s, &format!("{p}.conv1"), cin, co, 3, 0.0);
        norm_specs(&mut s, &format!("{p}.norm1"), co);
        conv_specs(&mut s, &format!("{p}.conv2"), co, co, 3, 0.0);
        norm_specs(&mut s, &format!("{p}.norm2"), co);
        cin = co;
    }
    for l in LEVELS {
        if l == 5 && cfg.use_ppm {
            continue;
        }
        conv_specs(&mut s, &format!("lateral{l}.conv1"), cfg.stage_channels(l), c, 1, 0.0);
        conv_specs(&mut s, &format!("lateral{l}.conv2"), c, c, 1, 0.0);
    }
    if cfg.use_ppm {
        let c5 = cfg.stage_channels(5);
        let cb = cfg.ppm_branch_channels();
        for i in 0..cfg.ppm_bins.len() {
            conv_specs(&mut s, &format!("ppm.branch{i}"), c5, cb, 1, 0.0);
        }
        conv_specs(&mut s, "ppm.fuse", c5 + cb * cfg.ppm_bins.len(), c, 3, 0.0);
        norm_specs(&mut s, "ppm.norm", c);
    }
    for gap in GAPS {
        if cfg.gap_enabled(gap) {
            conv_specs(&mut s, &format!("pfm{gap}.saliency"), 2 * c, 1, 3, 0.0);
            if cfg.pfm_for(gap).boundary_k > 0 {
                conv_specs(&mut s, &format!("pfm{gap}.boundary"), c, 1, 1, BOUNDARY_BIAS_INIT);
            }
        }
    }
    conv_specs(&mut s, "head.fuse", 4 * c, c, 3, 0.0);
    norm_specs(&mut s, "head.norm", c);
    conv_specs(&mut s, "head.classifier", c, cfg.num_classes, 1, 0.0);
    s
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so each tensor's stream depends only on (seed, name)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for spec in param_specs(cfg) {
        let t = match spec.init {
            Init::Scaled { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(&spec.shape, name_seed(seed, &spec.name), -bound, bound)?
            }
            Init::Const(v) => Tensor::full(&spec.shape, T::of(v))?,
        };
        tensors.insert(spec.name, t);
    }
    Ok(ParameterSet { tensors })
}

impl<T: Real> ParameterSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks names and shapes against what `cfg` expects.
    pub fn check_compatible(&self, cfg: &NetworkConfig) -> Result<()> {
        let mismatch = |detail: String| Err(Error::shape("checkpoint", detail));
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return mismatch(format!("{} parameters, the configuration needs {}", self.tensors.len(), specs.len()));
        }
        for spec in specs {
            match self.tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => return mismatch(format!("{}: shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)),
                None => return mismatch(format!("missing parameter {}", spec.name)),
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn attach(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad))).collect(),
        }
    }
}

/// Tape handles of an attached [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Collects the gradient of every parameter by name.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g))).collect()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Points one module selected, on its coarse level's grid.
#[derive(Debug, Clone)]
pub struct GapPoints {
    pub gap: usize,
    pub grid: (usize, usize),
    pub salient: Vec<PointSet>,
    pub boundary: Vec<PointSet>,
}

impl GapPoints {
    /// Salient and boundary points of batch item `item`.
    pub fn points_of(&self, item: usize) -> impl Iterator<Item = NormalizedPoint> + '_ {
        let s = self.salient.get(item).map(|p| p.points.as_slice()).unwrap_or(&[]);
        let b = self.boundary.get(item).map(|p| p.points.as_slice()).unwrap_or(&[]);
        s.iter().chain(b).copied()
    }
}

pub struct ForwardOutput {
    /// Class scores at a quarter of the input resolution.
    pub logits: Var,
    /// `(gap, B_l)` for every module with a boundary branch.
    pub boundary_maps: Vec<(usize, Var)>,
    pub points: Vec<GapPoints>,
    /// Backbone stages C2..C5.
    pub features: [Var; 4],
}

struct Builder<'a, T: Real> {
    tape: &'a mut Tape<T>,
    p: &'a ParamVars,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, x: Var, name: &str, geometry: ConvGeometry) -> Result<Var> {
        let (w, b) = (self.p.var(&format!("{name}.weight"))?, self.p.var(&format!("{name}.bias"))?);
        self.tape.conv2d(x, w, b, geometry)
    }

    fn norm_relu(&mut self, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (self.p.var(&format!("{name}.gamma"))?, self.p.var(&format!("{name}.beta"))?);
        let y = self.tape.channel_norm(x, g, b)?;
        self.tape.relu(y)
    }

    fn conv_norm_relu(&mut self, x: Var, conv: &str, norm: &str, geometry: ConvGeometry) -> Result<Var> {
        let y = self.conv(x, conv, geometry)?;
        self.norm_relu(y, norm)
    }

    fn lateral(&mut self, x: Var, l: usize) -> Result<Var> {
        let y = self.conv(x, &format!("lateral{l}.conv1"), ConvGeometry::POINT)?;
        let y = self.tape.relu(y)?;
        self.conv(y, &format!("lateral{l}.conv2"), ConvGeometry::POINT)
    }
}

pub fn backbone_forward<T: Real>(tape: &mut Tape<T>, p: &ParamVars, image: Var) -> Result<[Var; 4]> {
    let (_, _, h, w) = tape.value(image).dims4("backbone")?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::arg("backbone", format!("input {h}x{w} is not divisible by 32")));
    }
    let mut b = Builder { tape, p };
    let mut x = b.conv_norm_relu(image, "backbone.stem.conv", "backbone.stem.norm", ConvGeometry::DOWN3)?;
    let mut out = [x; 4];
    for (i, l) in LEVELS.into_iter().enumerate() {
        let s = format!("backbone.stage{l}");
        x = b.conv_norm_relu(x, &format!("{s}.conv1"), &format!("{s}.norm1"), ConvGeometry::DOWN3)?;
        x = b.conv_norm_relu(x, &format!("{s}.conv2"), &format!("{s}.norm2"), ConvGeometry::SAME3)?;
        out[i] = x;
    }
    Ok(out)
}

pub fn ppm_forward<T: Real>(tape: &mut Tape<T>, p: &ParamVars, c5: Var, bins: &[usize]) -> Result<Var> {
    let (_, _, h, w) = tape.value(c5).dims4("ppm")?;
    if let Some(b) = bins.iter().find(|&&b| b > h.min(w)) {
        return Err(Error::arg("ppm", format!("bin {b} exceeds the {h}x{w} map")));
    }
    let mut b = Builder { tape, p };
    let mut parts = vec![c5];
    for (i, &bin) in bins.iter().enumerate() {
        let pooled = b.tape.adaptive_avg_pool(c5, bin, bin)?;
        let y = b.conv(pooled, &format!("ppm.branch{i}"), ConvGeometry::POINT)?;
        let y = b.tape.relu(y)?;
        parts.push(b.tape.bilinear_resize(y, h, w)?);
    }
    let cat = b.tape.concat_channels(&parts)?;
    b.conv_norm_relu(cat, "ppm.fuse", "ppm.norm", ConvGeometry::SAME3)
}

/// Full forward pass. `nonce` only affects random salient sampling.
pub fn pfnet_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    image: Var,
    cfg: &NetworkConfig,
    nonce: u64,
) -> Result<ForwardOutput> {
    let (_, cin, h, w) = tape.value(image).dims4("pfnet")?;
    if cin != cfg.in_channels {
        return Err(Error::shape("pfnet", format!("image has {cin} channels, expected {}", cfg.in_channels)));
    }
    let features = backbone_forward(tape, p, image)?;
    let mut b = Builder { tape, p };
    // fused[i] holds level LEVELS[i]
    let mut fused: [Option<Var>; 4] = [None; 4];
    fused[3] = Some(if cfg.use_ppm {
        let bins: Vec<usize> = {
            let (h5, w5) = b.tape.value(features[3]).dims4("pfnet").map(|(_, _, a, c)| (a, c))?;
            cfg.ppm_bins.iter().map(|&x| x.min(h5).min(w5)).collect()
        };
        ppm_forward(b.tape, p, features[3], &bins)?
    } else {
        b.lateral(features[3], 5)?
    });

    let mut boundary_maps = Vec::new();
    let mut points = Vec::new();
    for gap in GAPS.into_iter().rev() {
        let (hi, lo) = (gap - 2, gap - 3);
        let top = fused[hi].expect("coarser level fused first");
        let lateral = b.lateral(features[lo], gap - 1)?;
        if cfg.gap_enabled(gap) {
            let (gh, gw) = b.tape.value(top).dims4("pfnet").map(|(_, _, a, c)| (a, c))?;
            let pcfg = cfg.pfm_for(gap).fitted(gh, gw);
            let params = PfmParams {
                saliency_weight: p.var(&format!("pfm{gap}.saliency.weight"))?,
                saliency_bias: p.var(&format!("pfm{gap}.saliency.bias"))?,
                boundary: if pcfg.boundary_k > 0 {
                    Some((p.var(&format!("pfm{gap}.boundary.weight"))?, p.var(&format!("pfm{gap}.boundary.bias"))?))
                } else {
                    None
                },
            };
            let out = pfm_forward(b.tape, top, lateral, &pcfg, &params, nonce.wrapping_mul(3).wrapping_add(gap as u64))?;
            fused[hi] = Some(out.refined_upper);
            fused[lo] = Some(out.refined);
            if let Some(map) = out.boundary_map {
                boundary_maps.push((gap, map));
            }
            points.push(GapPoints { gap, grid: (gh, gw), salient: out.salient_points, boundary: out.boundary_points });
        } else {
            let (_, _, lh, lw) = b.tape.value(lateral).dims4("pfnet")?;
            let up = b.tape.bilinear_resize(top, lh, lw)?;
            fused[lo] = Some(b.tape.add(lateral, up)?);
        }
    }

    let (qh, qw) = (h / 4, w / 4);
    let mut parts = Vec::with_capacity(4);
    for f in fused {
        let f = f.expect("every level fused");
        parts.push(if b.tape.shape(f)[2..] == [qh, qw] { f } else { b.tape.bilinear_resize(f, qh, qw)? });
    }
    let cat = b.tape.concat_channels(&parts)?;
    let y = b.conv_norm_relu(cat, "head.fuse", "head.norm", ConvGeometry::SAME3)?;
    let logits = b.conv(y, "head.classifier", ConvGeometry::POINT)?;
    Ok(ForwardOutput { logits, boundary_maps, points, features })
}
