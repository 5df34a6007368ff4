//! Run configuration: a sectioned `key = value` file plus `--section.key=value`
//! overrides. Every key has a default; unknown sections or keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use pfnet_core::data::{SceneConfig, Texture};
use pfnet_core::learn::TrainConfig;
use pfnet_core::metrics::{scaled_thresholds, DESK_THRESHOLD_SCALE, REFERENCE_THRESHOLDS};
use pfnet_core::network::{NetworkConfig, GAPS};
use pfnet_core::pointflow::{Direction, EdgeMode, PfmConfig, SalientSampling};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub scene: SceneConfig,
    pub count: usize,
    /// Every `val_every`-th scene goes to the validation split; 0 means none.
    pub val_every: usize,
    pub crop_size: usize,
    pub crop_stride: usize,
    /// Also write PPM/PGM previews next to each scene.
    pub previews: bool,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), count: 250, val_every: 5, crop_size: 64, crop_stride: 37, previews: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub core: TrainConfig,
    /// Windows drawn per scene and epoch; at least the window count means all.
    pub crops_per_scene: usize,
    pub augment: bool,
    /// Iterations between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { core: TrainConfig::default(), crops_per_scene: 9, augment: true, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Boundary tolerances at the reference scale.
    pub reference_thresholds: Vec<usize>,
    pub threshold_scale: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { reference_thresholds: REFERENCE_THRESHOLDS.to_vec(), threshold_scale: DESK_THRESHOLD_SCALE }
    }
}

impl EvalSettings {
    pub fn thresholds(&self) -> Vec<usize> {
        scaled_thresholds(&self.reference_thresholds, self.threshold_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Network settings; input size and class count are taken from `data`.
    pub network: NetworkConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::default(),
            train: TrainSettings::default(),
            data: DataSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Usage(format!("{key}: cannot read {value:?} as {expected}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
}

fn real(key: &str, v: &str) -> CliResult<f64> {
    num::<f64>(key, v).and_then(|x| if x.is_finite() { Ok(x) } else { Err(bad(key, v, "a finite number")) })
}

fn flag(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn pair(key: &str, v: &str) -> CliResult<(usize, usize)> {
    let (a, b) = v.split_once('x').ok_or_else(|| bad(key, v, "AxB"))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn list(key: &str, v: &str) -> CliResult<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn show_pair((a, b): (usize, usize)) -> String {
    format!("{a}x{b}")
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::TopDown => "td",
        Direction::BottomUp => "bu",
        Direction::TdThenBu => "td_then_bu",
    }
}

pub fn edge_mode_name(m: EdgeMode) -> &'static str {
    match m {
        EdgeMode::Subtraction => "subtraction",
        EdgeMode::Direct => "direct",
        EdgeMode::Addition => "addition",
    }
}

pub fn sampling_name(s: SalientSampling) -> &'static str {
    match s {
        SalientSampling::MaxPool => "max_pool",
        SalientSampling::UniformRandom => "uniform_random",
        SalientSampling::AttentionTopk => "attention_topk",
    }
}

fn direction(key: &str, v: &str) -> CliResult<Direction> {
    [Direction::TopDown, Direction::BottomUp, Direction::TdThenBu]
        .into_iter()
        .find(|&d| direction_name(d) == v)
        .ok_or_else(|| bad(key, v, "td, bu or td_then_bu"))
}

fn edge_mode(key: &str, v: &str) -> CliResult<EdgeMode> {
    [EdgeMode::Subtraction, EdgeMode::Direct, EdgeMode::Addition]
        .into_iter()
        .find(|&m| edge_mode_name(m) == v)
        .ok_or_else(|| bad(key, v, "subtraction, direct or addition"))
}

fn sampling(key: &str, v: &str) -> CliResult<SalientSampling> {
    [SalientSampling::MaxPool, SalientSampling::UniformRandom, SalientSampling::AttentionTopk]
        .into_iter()
        .find(|&s| sampling_name(s) == v)
        .ok_or_else(|| bad(key, v, "max_pool, uniform_random or attention_topk"))
}

fn texture(key: &str, v: &str) -> CliResult<Texture> {
    match v {
        "flat" => Ok(Texture::Flat),
        "noise" => Ok(Texture::Noise),
        _ => Err(bad(key, v, "flat or noise")),
    }
}

fn texture_name(t: Texture) -> &'static str {
    match t {
        Texture::Flat => "flat",
        Texture::Noise => "noise",
    }
}

fn s(v: impl Display) -> String {
    v.to_string()
}

fn pfm_entries(p: &PfmConfig) -> Vec<(&'static str, String)> {
    vec![
        ("salient_kernel", show_pair(p.salient_kernel)),
        ("boundary_k", s(p.boundary_k)),
        ("direction", s(direction_name(p.direction))),
        ("edge_mode", s(edge_mode_name(p.edge_mode))),
        ("salient_sampling", s(sampling_name(p.salient_sampling))),
        ("affinity_scale", s(p.affinity_scale)),
        ("sampling_seed", s(p.sampling_seed)),
    ]
}

fn set_pfm(p: &mut PfmConfig, path: &str, key: &str, v: &str) -> CliResult<()> {
    match key {
        "salient_kernel" => p.salient_kernel = pair(path, v)?,
        "boundary_k" => p.boundary_k = num(path, v)?,
        "direction" => p.direction = direction(path, v)?,
        "edge_mode" => p.edge_mode = edge_mode(path, v)?,
        "salient_sampling" => p.salient_sampling = sampling(path, v)?,
        "affinity_scale" => p.affinity_scale = real(path, v)?,
        "sampling_seed" => p.sampling_seed = num(path, v)?,
        _ => return Err(CliError::Usage(format!("unknown key {path}"))),
    }
    Ok(())
}

impl RunConfig {
    /// `(section, [(key, value)])` in file order.
    pub fn sections(&self) -> Vec<(String, Vec<(&'static str, String)>)> {
        let n = &self.network;
        let t = &self.train;
        let d = &self.data;
        let sc = &d.scene;
        let mut out = vec![
            ("run".to_string(), vec![("seed", s(self.seed))]),
            (
                "data".to_string(),
                vec![
                    ("canvas", show_pair(sc.canvas)),
                    ("num_classes", s(sc.num_classes)),
                    ("objects_per_scene", format!("{},{}", sc.objects_per_scene.0, sc.objects_per_scene.1)),
                    ("object_size", format!("{},{}", sc.object_size.0, sc.object_size.1)),
                    ("target_fg_ratio", s(sc.target_fg_ratio)),
                    ("texture", s(texture_name(sc.texture))),
                    ("count", s(d.count)),
                    ("val_every", s(d.val_every)),
                    ("crop_size", s(d.crop_size)),
                    ("crop_stride", s(d.crop_stride)),
                    ("previews", s(d.previews)),
                ],
            ),
            (
                "network".to_string(),
                vec![
                    ("fpn_channels", s(n.fpn_channels)),
                    ("backbone_channels", show_list(&n.backbone_channels)),
                    ("use_ppm", s(n.use_ppm)),
                    ("ppm_bins", show_list(&n.ppm_bins)),
                    ("pfm_gaps", show_list(&n.pfm_enabled_gaps)),
                ],
            ),
        ];
        for gap in GAPS {
            out.push((format!("pfm.gap{gap}"), pfm_entries(n.pfm_for(gap))));
        }
        out.push((
            "train".to_string(),
            vec![
                ("epochs", s(t.core.epochs)),
                ("batch_size", s(t.core.batch_size)),
                ("base_lr", s(t.core.base_lr)),
                ("momentum", s(t.core.momentum)),
                ("weight_decay", s(t.core.weight_decay)),
                ("poly_power", s(t.core.poly_power)),
                ("edge_radius", s(t.core.edge_radius)),
                ("seg_loss_weight", s(t.core.seg_loss_weight)),
                ("edge_loss_weight", s(t.core.edge_loss_weight)),
                ("crops_per_scene", s(t.crops_per_scene)),
                ("augment", s(t.augment)),
                ("checkpoint_every", s(t.checkpoint_every)),
            ],
        ));
        out.push((
            "eval".to_string(),
            vec![
                ("reference_thresholds", show_list(&self.eval.reference_thresholds)),
                ("threshold_scale", s(self.eval.threshold_scale)),
            ],
        ));
        out
    }

    /// Renders the configuration in the file grammar.
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        for (section, entries) in self.sections() {
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str(&format!("[{section}]\n"));
            for (k, v) in entries {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        text
    }

    /// Assigns one value by section and key.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> CliResult<()> {
        let path = format!("{section}.{key}");
        let p = path.as_str();
        let range = |v: &str| -> CliResult<(usize, usize)> {
            let r = list(p, v)?;
            match r[..] {
                [a, b] => Ok((a, b)),
                _ => Err(bad(p, v, "two comma-separated integers")),
            }
        };
        match (section, key) {
            ("run", "seed") => self.seed = num(p, v)?,
            ("data", "canvas") => self.data.scene.canvas = pair(p, v)?,
            ("data", "num_classes") => self.data.scene.num_classes = num(p, v)?,
            ("data", "objects_per_scene") => self.data.scene.objects_per_scene = range(v)?,
            ("data", "object_size") => self.data.scene.object_size = range(v)?,
            ("data", "target_fg_ratio") => self.data.scene.target_fg_ratio = real(p, v)?,
            ("data", "texture") => self.data.scene.texture = texture(p, v)?,
            ("data", "count") => self.data.count = num(p, v)?,
            ("data", "val_every") => self.data.val_every = num(p, v)?,
            ("data", "crop_size") => self.data.crop_size = num(p, v)?,
            ("data", "crop_stride") => self.data.crop_stride = num(p, v)?,
            ("data", "previews") => self.data.previews = flag(p, v)?,
            ("network", "fpn_channels") => self.network.fpn_channels = num(p, v)?,
            ("network", "backbone_channels") => {
                self.network.backbone_channels =
                    list(p, v)?.try_into().map_err(|_| bad(p, v, "four comma-separated integers"))?
            }
            ("network", "use_ppm") => self.network.use_ppm = flag(p, v)?,
            ("network", "ppm_bins") => self.network.ppm_bins = list(p, v)?,
            ("network", "pfm_gaps") => self.network.pfm_enabled_gaps = list(p, v)?,
            ("train", "epochs") => self.train.core.epochs = num(p, v)?,
            ("train", "batch_size") => self.train.core.batch_size = num(p, v)?,
            ("train", "base_lr") => self.train.core.base_lr = real(p, v)?,
            ("train", "momentum") => self.train.core.momentum = real(p, v)?,
            ("train", "weight_decay") => self.train.core.weight_decay = real(p, v)?,
            ("train", "poly_power") => self.train.core.poly_power = real(p, v)?,
            ("train", "edge_radius") => self.train.core.edge_radius = num(p, v)?,
            ("train", "seg_loss_weight") => self.train.core.seg_loss_weight = real(p, v)?,
            ("train", "edge_loss_weight") => self.train.core.edge_loss_weight = real(p, v)?,
            ("train", "crops_per_scene") => self.train.crops_per_scene = num(p, v)?,
            ("train", "augment") => self.train.augment = flag(p, v)?,
            ("train", "checkpoint_every") => self.train.checkpoint_every = num(p, v)?,
            ("eval", "reference_thresholds") => self.eval.reference_thresholds = list(p, v)?,
            ("eval", "threshold_scale") => self.eval.threshold_scale = real(p, v)?,
            _ => {
                let gap = section.strip_prefix("pfm.gap").and_then(|g| g.parse::<usize>().ok());
                match gap {
                    Some(g) if GAPS.contains(&g) => set_pfm(&mut self.network.pfm[g - 3], p, key, v)?,
                    _ => return Err(CliError::Usage(format!("unknown key {p}"))),
                }
            }
        }
        Ok(())
    }

    /// Applies a dot path such as `pfm.gap4.boundary_k`; the section is
    /// everything before the last dot.
    pub fn set_path(&mut self, path: &str, v: &str) -> CliResult<()> {
        let (section, key) = path.rsplit_once('.').ok_or_else(|| CliError::Usage(format!("override {path} has no section")))?;
        self.set(section, key, v)
    }

    /// Applies a file in the `[section]` / `key = value` grammar on top of
    /// the current values. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Usage(format!("line {}: {msg}", no + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| at(format!("unclosed section header {line:?}")))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, found {line:?}")))?;
            let sec = section.as_deref().ok_or_else(|| at("key outside any section".into()))?;
            self.set(sec, k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// The network as trained and evaluated: crop-sized input, data classes.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_size: (self.data.crop_size, self.data.crop_size),
            num_classes: self.data.scene.num_classes,
            ..self.network.clone()
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { seed: self.seed, ..self.data.scene.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.core.clone() }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network_config().validate()?;
        self.scene_config().validate()?;
        self.train_config().validate()?;
        let (h, w) = self.data.scene.canvas;
        if self.data.crop_size > h.min(w) || self.data.crop_stride == 0 {
            return Err(CliError::Usage(format!(
                "crop {} with stride {} does not fit the {h}x{w} canvas",
                self.data.crop_size, self.data.crop_stride
            )));
        }
        if self.train.crops_per_scene == 0 {
            return Err(CliError::Usage("train.crops_per_scene must be at least 1".into()));
        }
        if self.eval.reference_thresholds.is_empty() || !(self.eval.threshold_scale > 0.0) {
            return Err(CliError::Usage("eval needs thresholds and a positive scale".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_path("pfm.gap4.direction", "td_then_bu").unwrap();
        cfg.set_path("network.pfm_gaps", "").unwrap();
        cfg.set_path("train.base_lr", "0.0125").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_rendered_key_is_settable() {
        let cfg = RunConfig::default();
        for (section, entries) in cfg.sections() {
            for (k, v) in entries {
                let mut c = RunConfig::default();
                c.set(&section, k, &v).unwrap();
                assert_eq!(c, cfg, "{section}.{k}");
            }
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set_path("train.epoch", "3").is_err());
        assert!(cfg.set_path("pfm.gap6.boundary_k", "3").is_err());
        assert!(cfg.set_path("train.base_lr", "nan").is_err());
        assert!(cfg.set_path("network.backbone_channels", "1,2,3").is_err());
        assert!(cfg.set_path("pfm.gap3.direction", "sideways").is_err());
        assert!(RunConfig::parse("seed = 1\n").is_err());
        assert!(RunConfig::parse("[train\nepochs = 1\n").is_err());
        let e = RunConfig::parse("[train]\n# note\nepochs = 2\nlr = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("train.lr"), "{e}");
    }

    #[test]
    fn overrides_win_over_file() {
        let mut cfg = RunConfig::parse("[data]\ncount = 7\n").unwrap();
        cfg.set_path("data.count", "8").unwrap();
        assert_eq!(cfg.data.count, 8);
    }

    #[test]
    fn derived_network_follows_data() {
        let mut cfg = RunConfig::default();
        cfg.set_path("data.crop_size", "96").unwrap();
        cfg.set_path("data.num_classes", "4").unwrap();
        let n = cfg.network_config();
        assert_eq!((n.input_size, n.num_classes), ((96, 96), 4));
    }
}
