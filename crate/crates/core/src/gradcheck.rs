//! Finite-difference suites for every module and the end-to-end loss.

use fan_autograd::suite::{op_gradient_suite, random_tensor};
use fan_autograd::{
    grad_check_subset, BoundParams, GradCheckOptions, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var,
};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{FanError, Result};
use crate::head::{similarity_mask, BinaryMask};
use crate::model::{FanModel, ForwardOutput, LossWeights};
use crate::rng;
use crate::text::{tokenize, Vocabulary};
use crate::vision::Image;

pub const MODULES: [&str; 8] =
    ["ops", "text-encoder", "vision-encoder", "activation-module", "v2l-decoder", "l2v-decoder", "mask-head", "end-to-end"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl ModuleCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Inputs of one randomized module trial on a tiny network.
struct Fixture {
    model: FanModel,
    image: Image,
    tokens: crate::text::TokenSequence,
    mask: BinaryMask,
}

const SIZE: usize = 32;

/// Gradients below this magnitude are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-5;

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = ModelConfig::tiny();
    let model = FanModel::new(&cfg, rng::derive_seed(seed, "gradcheck/model"))?;
    let mut r = rng::stream(seed, "gradcheck/inputs");
    let pixels: Vec<f64> = (0..SIZE * SIZE * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    let image = Image::new(Tensor::new(vec![SIZE, SIZE, 3], pixels)?)?;
    let vocab = Vocabulary::synthetic();
    let phrases = ["the red circle", "the blue square above", "green triangle"];
    let tokens = tokenize(phrases[r.gen_range(0..phrases.len())], &vocab, cfg.max_len)?;
    let (cy, cx, rad) = (r.gen_range(8.0..24.0), r.gen_range(8.0..24.0), r.gen_range(4.0..8.0));
    let values = (0..SIZE * SIZE)
        .map(|i| {
            let (y, x) = ((i / SIZE) as f64 + 0.5, (i % SIZE) as f64 + 0.5);
            (y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad
        })
        .collect();
    Ok(Fixture { model, image, tokens, mask: BinaryMask::new(SIZE, SIZE, values)? })
}

fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.entry(id).name.starts_with(prefix)).collect()
}

/// `sum(x ⊙ w)` for a fixed random `w` of matching shape, scaled to unit variance.
fn project(g: &mut Graph, x: Var, seed: u64, name: &str) -> Result<Var> {
    let n = g.shape(x).iter().product::<usize>() as f64;
    let w = random_tensor(&mut rng::stream(seed, name), g.shape(x), 1.0 / n.sqrt());
    let wv = g.constant(w);
    let prod = g.mul(x, wv)?;
    Ok(g.sum(prod))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = g.add(total, v)?;
    }
    Ok(total)
}

type Readout = fn(&mut Graph, &Fixture, &ForwardOutput, u64) -> Result<Var>;

fn readout_for(module: &str) -> Option<(&'static str, Readout)> {
    Some(match module {
        "text-encoder" => ("text.", |g, _, out, s| {
            let a = project(g, out.text.f_w, s, "f_w")?;
            let b = project(g, out.text.f_s, s, "f_s")?;
            sum_vars(g, &[a, b])
        }),
        "vision-encoder" => ("vision.", |g, _, out, s| {
            let parts = (0..4)
                .map(|i| project(g, out.pyramid.levels[i], s, &format!("level{i}")))
                .collect::<Result<Vec<_>>>()?;
            sum_vars(g, &parts)
        }),
        "activation-module" => ("activation.", |g, _, out, s| {
            let parts =
                (0..4).map(|i| project(g, out.activated[i], s, &format!("act{i}"))).collect::<Result<Vec<_>>>()?;
            sum_vars(g, &parts)
        }),
        "v2l-decoder" => ("v2l.", |g, _, out, s| project(g, out.aligned, s, "aligned")),
        "l2v-decoder" => ("l2v.", |g, _, out, s| project(g, out.sentence, s, "sentence")),
        "end-to-end" => ("", |g, fx, out, _| {
            let w = LossWeights { full_resolution: true, ..LossWeights::default() };
            fx.model.loss(g, out.logits, &fx.mask, &w)
        }),
        _ => return None,
    })
}

fn module_trial(module: &str, seed: u64, opts: &GradCheckOptions) -> Result<(usize, f64, String)> {
    let (prefix, readout) = readout_for(module).ok_or_else(|| FanError::Config(format!("unknown module {module:?}")))?;
    let fx = fixture(seed)?;
    let ids = ids_with_prefix(&fx.model.params, prefix);
    let f = |g: &mut Graph, p: &BoundParams| -> Result<Var> {
        let out = fx.model.forward(g, p, &fx.image, &fx.tokens)?;
        readout(g, &fx, &out, seed)
    };
    let report = grad_check_subset(&fx.model.params, &ids, opts, f)?;
    let worst = report.worst().map_or(String::new(), |w| w.name.clone());
    Ok((report.coordinates(), report.max_rel_error(), worst))
}

/// Similarity head and both loss resolutions with the visual map,
/// sentence vector, and bias as free parameters.
fn mask_head_trial(seed: u64, opts: &GradCheckOptions) -> Result<(usize, f64, String)> {
    let fx = fixture(seed)?;
    let mut r = rng::stream(seed, "gradcheck/head");
    let d = fx.model.config.d_model;
    let h = SIZE / 4;
    let mut store = ParamStore::new();
    store.add("visual", random_tensor(&mut r, &[h, h, d], 1.0), ParamGroup::Default)?;
    store.add("sentence", random_tensor(&mut r, &[1, d], 1.0), ParamGroup::Default)?;
    store.add("bias", random_tensor(&mut r, &[1], 0.5), ParamGroup::Default)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let f = |g: &mut Graph, p: &BoundParams| -> Result<Var> {
        let logits = similarity_mask(g, p[ParamId(0)], p[ParamId(1)], p[ParamId(2)])?;
        let coarse = fx.model.loss(g, logits, &fx.mask, &LossWeights::default())?;
        let fine = fx.model.loss(g, logits, &fx.mask, &LossWeights { full_resolution: true, ..LossWeights::default() })?;
        Ok(g.add(coarse, fine)?)
    };
    let report = grad_check_subset(&store, &ids, opts, f)?;
    let worst = report.worst().map_or(String::new(), |w| w.name.clone());
    Ok((report.coordinates(), report.max_rel_error(), worst))
}

/// Runs the named suite; `ops` covers every differentiable primitive.
pub fn run_module(module: &str, trials: usize, seed: u64) -> Result<ModuleCheck> {
    if module == "ops" {
        let checks = op_gradient_suite(trials.max(20), seed)?;
        let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
        return Ok(ModuleCheck {
            module: module.into(),
            trials: trials.max(20),
            coordinates: checks.len(),
            max_rel_error: worst.map_or(0.0, |w| w.max_rel_error),
            worst: worst.map_or(String::new(), |w| w.op.to_string()),
        });
    }
    if !MODULES.contains(&module) {
        return Err(FanError::Config(format!("unknown module {module:?}; expected one of {}", MODULES.join(", "))));
    }
    let opts = GradCheckOptions {
        coords_per_param: if module == "end-to-end" { 3 } else { 6 },
        floor: GRADIENT_FLOOR,
        ..Default::default()
    };
    let mut check =
        ModuleCheck { module: module.into(), trials, coordinates: 0, max_rel_error: 0.0, worst: String::new() };
    for t in 0..trials {
        let s = rng::derive_seed(seed, &format!("{module}/{t}"));
        let o = GradCheckOptions { seed: s, ..opts };
        let (n, err, worst) = if module == "mask-head" { mask_head_trial(s, &o)? } else { module_trial(module, s, &o)? };
        check.coordinates += n;
        if err >= check.max_rel_error {
            check.max_rel_error = err;
            check.worst = worst;
        }
    }
    Ok(check)
}

pub fn run_all(trials: usize, seed: u64) -> Result<Vec<ModuleCheck>> {
    MODULES.iter().map(|m| run_module(m, trials, seed)).collect()
}
