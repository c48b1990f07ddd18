//! Ablation over adaptation settings on a synthetic source/target pair.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::encoder::SegModel;
use crate::exec::Exec;
use crate::mixup::MixConfig;
use crate::model::DomainSample;
use crate::synth::{gen_domain, seeded, DomainParams, TARGET_ID_OFFSET};
use crate::training::{
    evaluate, pseudo_labels, strip_labels, train, train_from, TrainConfig, TrainError,
};

/// Sample ids of the held-out target evaluation scenes start here.
pub const EVAL_ID_OFFSET: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    SourceOnly,
    Align,
    AlignScene,
    AlignInstance,
    AlignHybrid,
    HybridPseudo,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::SourceOnly,
        Setting::Align,
        Setting::AlignScene,
        Setting::AlignInstance,
        Setting::AlignHybrid,
        Setting::HybridPseudo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::SourceOnly => "source-only",
            Setting::Align => "+align",
            Setting::AlignScene => "+align+scene",
            Setting::AlignInstance => "+align+instance",
            Setting::AlignHybrid => "+align+hybrid",
            Setting::HybridPseudo => "+hybrid+pseudo",
        }
    }

    /// Mixing weights (polar, range, laser, instance), if the setting mixes.
    pub fn mix_weights(self) -> Option<[f64; 4]> {
        match self {
            Setting::SourceOnly | Setting::Align => None,
            Setting::AlignScene => Some([1.0, 1.0, 1.0, 0.0]),
            Setting::AlignInstance => Some([0.0, 0.0, 0.0, 1.0]),
            Setting::AlignHybrid | Setting::HybridPseudo => Some([1.0; 4]),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown setting {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub source: DomainParams,
    pub target: DomainParams,
    /// Training scenes per domain.
    pub scenes: usize,
    /// Held-out labelled target scenes used for scoring.
    pub eval_scenes: usize,
    pub train: TrainConfig,
    pub mix: MixConfig,
    /// Epochs of pseudo-label retraining.
    pub pseudo_epochs: usize,
    /// Retrain from scratch instead of fine-tuning on pseudo-labels.
    pub pseudo_restart: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            source: DomainParams::source(),
            target: DomainParams::target(),
            scenes: 40,
            eval_scenes: 20,
            train: TrainConfig {
                lambda: 5.0,
                ..TrainConfig::default()
            },
            mix: MixConfig::default(),
            pseudo_epochs: 3,
            pseudo_restart: false,
        }
    }
}

/// Generated data of one seed.
pub struct SeedData {
    pub sources: Vec<DomainSample>,
    /// Training targets, labels removed.
    pub targets: Vec<DomainSample>,
    pub eval: Vec<DomainSample>,
}

impl SeedData {
    pub fn generate(cfg: &AblationConfig, seed: u64) -> Self {
        let exec = Exec::default();
        let tgt = seeded(&cfg.target, seed);
        Self {
            sources: gen_domain(&seeded(&cfg.source, seed), cfg.scenes, 0, exec),
            targets: strip_labels(&gen_domain(&tgt, cfg.scenes, TARGET_ID_OFFSET, exec)),
            eval: gen_domain(&tgt, cfg.eval_scenes, EVAL_ID_OFFSET, exec),
        }
    }
}

fn train_cfg(cfg: &AblationConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Trains one setting. `HybridPseudo` retrains from a freshly trained
/// `AlignHybrid` model unless `hybrid` supplies one.
pub fn run_setting(
    setting: Setting,
    data: &SeedData,
    cfg: &AblationConfig,
    seed: u64,
    hybrid: Option<&SegModel>,
) -> Result<SegModel, TrainError> {
    let mut tc = train_cfg(cfg, seed);
    let mix = setting.mix_weights().map(|weights| MixConfig {
        weights,
        ..cfg.mix.clone()
    });
    match setting {
        Setting::SourceOnly => {
            tc.lambda = 0.0;
            Ok(train(&data.sources, &[], &[], None, &tc)?.model)
        }
        Setting::HybridPseudo => {
            let base = match hybrid {
                Some(m) => m.clone(),
                None => run_setting(Setting::AlignHybrid, data, cfg, seed, None)?,
            };
            let (labelled, _) = pseudo_labels(&base, &data.targets, tc.tau, Exec::default());
            tc.epochs = cfg.pseudo_epochs;
            tc.seed = seed.wrapping_add(0x5EED);
            let init = (!cfg.pseudo_restart).then_some(base);
            Ok(train_from(init, &data.sources, &labelled, &[], mix.as_ref(), &tc)?.model)
        }
        _ => Ok(train(&data.sources, &data.targets, &[], mix.as_ref(), &tc)?.model),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    /// `miou[setting][seed]`, settings in [`Setting::ALL`] order.
    pub miou: Vec<Vec<f64>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationResult {
    pub fn row(&self, s: Setting) -> &[f64] {
        &self.miou[Setting::ALL.iter().position(|&x| x == s).unwrap()]
    }

    pub fn median(&self, s: Setting) -> f64 {
        median(self.row(s))
    }

    /// Setting with the highest median.
    pub fn best(&self) -> Setting {
        Setting::ALL
            .into_iter()
            .max_by(|a, b| self.median(*a).total_cmp(&self.median(*b)))
            .unwrap()
    }

    /// Number of seeds where `a` scores strictly above `b`.
    pub fn wins(&self, a: Setting, b: Setting) -> usize {
        self.row(a)
            .iter()
            .zip(self.row(b))
            .filter(|(x, y)| x > y)
            .count()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        write!(out, "{:<18}", "setting").unwrap();
        for s in &self.seeds {
            write!(out, " {:>8}", format!("seed{s}")).unwrap();
        }
        writeln!(out, " {:>8}", "median").unwrap();
        for s in Setting::ALL {
            write!(out, "{:<18}", s.name()).unwrap();
            for v in self.row(s) {
                write!(out, " {v:>8.4}").unwrap();
            }
            writeln!(out, " {:>8.4}", self.median(s)).unwrap();
        }
        out
    }
}

/// Runs every setting for every seed. `progress` is called after each run.
pub fn run_ablation(
    cfg: &AblationConfig,
    seeds: &[u64],
    mut progress: impl FnMut(Setting, u64, f64),
) -> Result<AblationResult, TrainError> {
    let mut miou = vec![Vec::with_capacity(seeds.len()); Setting::ALL.len()];
    for &seed in seeds {
        let data = SeedData::generate(cfg, seed);
        let mut hybrid = None;
        for (k, s) in Setting::ALL.into_iter().enumerate() {
            let model = run_setting(s, &data, cfg, seed, hybrid.as_ref())?;
            let score = evaluate(&model, &data.eval, Exec::default())?.miou();
            progress(s, seed, score);
            miou[k].push(score);
            if s == Setting::AlignHybrid {
                hybrid = Some(model);
            }
        }
    }
    Ok(AblationResult {
        seeds: seeds.to_vec(),
        miou,
    })
}

/// Scores `setting` when the target domain draws its class embeddings from
/// `class_seed` instead of sharing the source's.
pub fn run_split_embeddings(
    cfg: &AblationConfig,
    setting: Setting,
    seeds: &[u64],
    class_seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let mut split = cfg.clone();
    split.target.class_seed = class_seed;
    seeds
        .iter()
        .map(|&seed| {
            let data = SeedData::generate(&split, seed);
            let model = run_setting(setting, &data, &split, seed, None)?;
            Ok(evaluate(&model, &data.eval, Exec::default())?.miou())
        })
        .collect()
}
