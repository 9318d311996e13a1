//! Fixtures and checks shared by the contract tests and the acceptance run.
//! Every check returns `Ok(detail)` or `Err(detail)`.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use acal_core::data::{DataConfig, DomainDataset, DomainPair, GlyphPairConfig, Split};
use acal_core::eval::accuracy;
use acal_core::nets::{InitSpec, Layer, Mode, Network, Role};
use acal_core::objectives::{
    augmented_task_terms, compose_variant, relaxed_cycle_loss, Batch, ComposeOptions, LossBundle, NetSet, Phase,
    Supervision, VariantName, VariantSpec,
};
use acal_core::trainer::{init_nets, init_source_model, pretrain_source, PretrainConfig, TrainConfig};
use acal_core::{Graph, Tensor};

pub type Check = Result<String, String>;

pub const SHAPE: [usize; 3] = [1, 16, 16];
pub const CLASSES: usize = 10;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn tiny_pair(seed: u64, fraction: f64) -> DomainPair {
    DataConfig::Glyph(GlyphPairConfig {
        source_per_class: 4,
        target_pool_per_class: 3,
        target_per_class: 2,
        eval_per_class: 1,
        ..GlyphPairConfig::default()
    })
    .build(seed, fraction)
    .unwrap()
}

/// Untrained networks plus one labeled source batch and one labeled target
/// batch of six items each.
pub struct Fixture {
    pub nets: NetSet,
    pub source: Batch,
    pub target: Batch,
}

impl Fixture {
    pub fn new(seed: u64) -> Fixture {
        let pair = tiny_pair(seed, 1.0);
        let cfg = TrainConfig {
            variant: VariantSpec::new(VariantName::Acal),
            seed,
            ..TrainConfig::default()
        };
        let m_s = init_source_model(seed, SHAPE, CLASSES).unwrap();
        let nets = init_nets(&cfg, &m_s, CLASSES).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        Fixture {
            nets,
            source: Batch::from_dataset(&pair.source_train, &idx),
            target: Batch::from_dataset(&pair.target_train, &idx),
        }
    }

    pub fn unlabeled_target(&self) -> Batch {
        Batch {
            x: self.target.x.clone(),
            y: vec![None; self.target.len()],
        }
    }

    pub fn compose(&self, spec: &VariantSpec, target: &Batch, phase: Phase) -> acal_core::Result<LossBundle> {
        compose_variant(spec, &self.source, target, &self.nets, ComposeOptions { phase, dropout_seed: 7 })
    }
}

fn supervision(supervised: bool) -> Supervision {
    if supervised {
        Supervision::Supervised
    } else {
        Supervision::Unsupervised
    }
}

/// One line per (variant, branch) in the format of `variant_terms.txt`.
/// Variants that need target labels must reject an unlabeled batch.
pub fn render_variant_terms(fx: &Fixture) -> Result<String, String> {
    let mut out = String::new();
    for name in VariantName::ALL {
        for supervised in [true, false] {
            let spec = VariantSpec::new(name).with_supervision(supervision(supervised));
            let target = if supervised { fx.target.clone() } else { fx.unlabeled_target() };
            let bundle = fx.compose(&spec, &target, Phase::All);
            if !supervised && !name.accepts_unlabeled_target() {
                if bundle.is_ok() {
                    return Err(format!("{name} accepted an unlabeled target batch"));
                }
                continue;
            }
            let bundle = bundle.map_err(|e| format!("{name}: {e}"))?;
            let keys: Vec<String> = bundle.diagnostics().into_keys().collect();
            let set = spec.terms(supervised);
            if set.keys() != keys {
                return Err(format!("{name}: built {keys:?}, registry lists {:?}", set.keys()));
            }
            let mut fb = Vec::new();
            if set.feedback_st {
                fb.push("st");
            }
            if set.feedback_ts {
                fb.push("ts");
            }
            let fb = if fb.is_empty() { "-".to_string() } else { fb.join(" ") };
            let branch = if supervised { "supervised" } else { "unsupervised" };
            out.push_str(&format!("{name} {branch}: {} | {fb}\n", keys.join(" ")));
        }
    }
    Ok(out)
}

pub fn golden_variant_terms() -> String {
    let text = std::fs::read_to_string(golden_dir().join("variant_terms.txt")).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn check_term_sets() -> Check {
    let fx = Fixture::new(3);
    let got = render_variant_terms(&fx)?;
    let want = golden_variant_terms();
    if got == want {
        Ok(format!("{} (variant, branch) pairs match the golden list", want.lines().count()))
    } else {
        for (g, w) in got.lines().zip(want.lines()) {
            if g != w {
                return Err(format!("got '{g}', golden '{w}'"));
            }
        }
        Err(format!("{} lines built, {} golden", got.lines().count(), want.lines().count()))
    }
}

const ADV_KEYS: [&str; 4] = ["adv_d_s", "adv_d_t", "adv_g_st", "adv_g_ts"];

fn max_grad_diff(a: &LossBundle, av: acal_core::Var, b: &LossBundle, bv: acal_core::Var) -> Result<f64, String> {
    let ga = a.gradients(av).map_err(|e| e.to_string())?;
    let gb = b.gradients(bv).map_err(|e| e.to_string())?;
    let ka: Vec<_> = ga.keys().collect();
    let kb: Vec<_> = gb.keys().collect();
    if ka != kb {
        return Err(format!("gradient keys differ: {ka:?} vs {kb:?}"));
    }
    let mut worst = 0.0f64;
    for (k, t) in ga.iter() {
        let u = gb.get(k).unwrap();
        for (x, y) in t.data().iter().zip(u.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// acal and cyclegan adversarial terms (and the discriminator gradients)
/// on the same networks and batches, for both branches acal supports.
pub fn check_adversarial_equality(tol: f64) -> Check {
    let fx = Fixture::new(4);
    let cyclegan = VariantSpec::new(VariantName::Cyclegan);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for phase in [Phase::All, Phase::Discriminators, Phase::Generators] {
        let c = fx.compose(&cyclegan, &fx.target, phase).map_err(|e| e.to_string())?;
        for supervised in [true, false] {
            let spec = VariantSpec::new(VariantName::Acal).with_supervision(supervision(supervised));
            let target = if supervised { fx.target.clone() } else { fx.unlabeled_target() };
            let a = fx.compose(&spec, &target, phase).map_err(|e| e.to_string())?;
            // The unlabeled batch keeps the same images, so the
            // adversarial terms must not notice the missing labels.
            let (da, dc) = (a.diagnostics(), c.diagnostics());
            for k in ADV_KEYS {
                match (da.get(k), dc.get(k)) {
                    (Some(x), Some(y)) => {
                        worst = worst.max((x - y).abs());
                        compared += 1;
                    }
                    (None, None) => {}
                    _ => return Err(format!("{k} built by only one variant in {phase:?}")),
                }
            }
            for (la, lc) in [(a.d_s_loss, c.d_s_loss), (a.d_t_loss, c.d_t_loss)] {
                if let (Some(x), Some(y)) = (la, lc) {
                    worst = worst.max(max_grad_diff(&a, x, &c, y)?);
                }
            }
        }
    }
    if compared == 0 {
        return Err("no adversarial terms compared".into());
    }
    if worst <= tol {
        Ok(format!("{compared} terms, max |diff| {worst:.3e}"))
    } else {
        Err(format!("max |diff| {worst:.3e} > {tol:e}"))
    }
}

/// Swapping the domains (batches, generators, discriminators) exchanges
/// the adversarial and reconstruction terms of cyclegan pairwise.
pub fn check_domain_swap() -> Check {
    let fx = Fixture::new(5);
    let spec = VariantSpec::new(VariantName::Cyclegan);
    let a = fx.compose(&spec, &fx.target, Phase::All).map_err(|e| e.to_string())?;
    let n = &fx.nets;
    let swapped = NetSet {
        g_st: n.g_ts.clone(),
        g_ts: n.g_st.clone(),
        d_s: n.d_t.clone(),
        d_t: n.d_s.clone(),
        m_s: n.m_s.clone(),
        m_t: n.m_t.clone(),
    };
    let b = compose_variant(
        &spec,
        &fx.target,
        &fx.source,
        &swapped,
        ComposeOptions { phase: Phase::All, dropout_seed: 7 },
    )
    .map_err(|e| e.to_string())?;
    let (da, db) = (a.diagnostics(), b.diagnostics());
    let pairs = [
        ("adv_d_s", "adv_d_t"),
        ("adv_d_t", "adv_d_s"),
        ("adv_g_st", "adv_g_ts"),
        ("adv_g_ts", "adv_g_st"),
        ("recon_sts", "recon_tst"),
        ("recon_tst", "recon_sts"),
    ];
    let mut worst = 0.0f64;
    for (x, y) in pairs {
        worst = worst.max((da[x] - db[y]).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("max |diff| {worst:.3e}"))
    } else {
        Err(format!("max |diff| {worst:.3e}"))
    }
}

/// Each named loss reaches only the networks it trains.
pub fn check_reachability() -> Check {
    let fx = Fixture::new(6);
    let owner: BTreeMap<&str, &[&str]> = BTreeMap::from([
        ("d_s_loss", &["d_s/"][..]),
        ("d_t_loss", &["d_t/"][..]),
        ("g_loss", &["g_st/", "g_ts/"][..]),
        ("m_s_loss", &["m_s/"][..]),
        ("m_t_loss", &["m_t/"][..]),
    ]);
    let mut cases: Vec<(VariantSpec, Batch)> = VariantName::ALL
        .into_iter()
        .map(|v| (VariantSpec::new(v), fx.target.clone()))
        .collect();
    for v in [VariantName::Acal, VariantName::NoAdaptation] {
        cases.push((VariantSpec::new(v).with_supervision(Supervision::Unsupervised), fx.unlabeled_target()));
    }
    let mut checked = 0;
    for (spec, target) in &cases {
        let b = fx.compose(spec, target, Phase::All).map_err(|e| e.to_string())?;
        for (name, var) in b.losses() {
            let grads = b.gradients(var).map_err(|e| e.to_string())?;
            if grads.is_empty() {
                return Err(format!("{}: {name} reaches no parameter", spec.name));
            }
            if let Some(k) = grads.keys().find(|k| !owner[name].iter().any(|p| k.starts_with(p))) {
                return Err(format!("{}: {name} reaches {k}", spec.name));
            }
            checked += 1;
        }
        if let Some(v) = b.term("task_t_pseudo") {
            let grads = b.gradients(v).map_err(|e| e.to_string())?;
            if grads.is_empty() || grads.keys().any(|k| !k.starts_with("m_t/")) {
                let keys: Vec<_> = grads.keys().collect();
                return Err(format!("task_t_pseudo reaches {keys:?}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} losses reach only their own networks"))
}

pub fn check_composition_contract() -> Check {
    let parts = [
        ("term sets", check_term_sets()),
        ("acal vs cyclegan adversarial terms", check_adversarial_equality(1e-12)),
    ];
    let mut notes = Vec::new();
    for (what, r) in parts {
        match r {
            Ok(d) => notes.push(format!("{what}: {d}")),
            Err(d) => return Err(format!("{what}: {d}")),
        }
    }
    Ok(notes.join("; "))
}

/// `CLASSES` one-hot images: image `k` has pixel `k` set to 1.
pub fn one_hot_dataset() -> DomainDataset {
    let per: usize = SHAPE.iter().product();
    let mut pixels = vec![0.0; per * CLASSES];
    for k in 0..CLASSES {
        pixels[k * per + k] = 1.0;
    }
    let labels = (0..CLASSES).map(Some).collect();
    DomainDataset::new("one-hot", SHAPE, pixels, labels, CLASSES, Split::Train).unwrap()
}

/// Dense classifier with logit 20 for the lit pixel's class and 0 elsewhere.
pub fn confident_classifier() -> Network {
    let per: usize = SHAPE.iter().product();
    let layers = vec![
        Layer::Flatten,
        Layer::Dense {
            name: "fc".into(),
            inputs: per,
            outputs: CLASSES,
        },
    ];
    let mut net = Network::from_layers(Role::Classifier, SHAPE, layers, InitSpec::new(1)).unwrap();
    let mut w = vec![0.0; per * CLASSES];
    for k in 0..CLASSES {
        w[k * CLASSES + k] = 20.0;
    }
    net.set_param("fc.weight", Tensor::new(&[per, CLASSES], w).unwrap()).unwrap();
    net.set_param("fc.bias", Tensor::zeros(&[CLASSES])).unwrap();
    net
}

fn identity_nets(fx: &Fixture, m: &Network) -> NetSet {
    let mut nets = fx.nets.clone();
    nets.g_st = Network::identity_generator(SHAPE);
    nets.g_ts = Network::identity_generator(SHAPE);
    nets.m_s = m.clone();
    nets.m_t = m.clone();
    nets
}

fn batch_of(ds: &DomainDataset) -> Batch {
    let idx: Vec<usize> = (0..ds.len()).collect();
    Batch::from_dataset(ds, &idx)
}

/// Identity generators reproduce their input, so both L1 cycles vanish.
pub fn check_identity_recon() -> Check {
    let fx = Fixture::new(8);
    let mut nets = fx.nets.clone();
    nets.g_st = Network::identity_generator(SHAPE);
    nets.g_ts = Network::identity_generator(SHAPE);
    let b = compose_variant(
        &VariantSpec::new(VariantName::Cyclegan),
        &fx.source,
        &fx.target,
        &nets,
        ComposeOptions { phase: Phase::All, dropout_seed: 7 },
    )
    .map_err(|e| e.to_string())?;
    let d = b.diagnostics();
    let (s, t) = (d["recon_sts"], d["recon_tst"]);
    if s == 0.0 && t == 0.0 {
        Ok("recon_sts = recon_tst = 0".into())
    } else {
        Err(format!("recon_sts {s:e}, recon_tst {t:e}"))
    }
}

/// Source model trained on a labeled glyph fixture until it classifies
/// every item correctly; both relaxed cycles through identity generators
/// then score below `tol`.
pub fn check_trained_relaxed(tol: f64) -> Check {
    let pair = tiny_pair(9, 1.0);
    let fixture = pair.source_train.subset(&(0..20).collect::<Vec<_>>());
    let cfg = TrainConfig {
        seed: 9,
        pretrain: PretrainConfig {
            steps: 400,
            batch_size: 20,
            lr: 3e-3,
        },
        ..TrainConfig::default()
    };
    let init = init_source_model(9, SHAPE, CLASSES).map_err(|e| e.to_string())?;
    let m = pretrain_source(&init, &fixture, &cfg).map_err(|e| e.to_string())?;
    let acc = accuracy(&m, &fixture).map_err(|e| e.to_string())?;
    if acc < 1.0 {
        return Err(format!("fixture accuracy {acc} after training"));
    }
    let batch = batch_of(&fixture);
    let y: Vec<usize> = batch.y.iter().map(|l| l.unwrap()).collect();
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone());
    let l = relaxed_cycle_loss(&mut g, &m, x, &y).map_err(|e| e.to_string())?;
    let direct = g.value(l).item();

    let fx = Fixture::new(9);
    let nets = identity_nets(&fx, &m);
    let b = compose_variant(
        &VariantSpec::new(VariantName::Rcal),
        &batch,
        &batch,
        &nets,
        ComposeOptions { phase: Phase::All, dropout_seed: 7 },
    )
    .map_err(|e| e.to_string())?;
    let d = b.diagnostics();
    let worst = direct.max(d["relaxed_sts"]).max(d["relaxed_tst"]);
    if worst < tol {
        Ok(format!("accuracy 1.0, max relaxed cycle loss {worst:.3e}"))
    } else {
        Err(format!("max relaxed cycle loss {worst:.3e} >= {tol:e}"))
    }
}

/// With a perfectly confident, correct classifier on both domains and
/// identity generators, every task term is below `tol`.
pub fn check_confident_task_terms(tol: f64) -> Check {
    let ds = one_hot_dataset();
    let m = confident_classifier();
    let batch = batch_of(&ds);
    let y: Vec<usize> = batch.y.iter().map(|l| l.unwrap()).collect();
    let mut worst = 0.0f64;
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone());
    let mapped = g.constant(batch.x.clone());
    let (m_loss, fb) =
        augmented_task_terms(&mut g, &m, "m_t", x, &y, mapped, &y, Mode::Eval).map_err(|e| e.to_string())?;
    worst = worst.max(g.value(m_loss).item()).max(g.value(fb).item());

    let fx = Fixture::new(10);
    let nets = identity_nets(&fx, &m);
    let b = compose_variant(
        &VariantSpec::new(VariantName::Acal),
        &batch,
        &batch,
        &nets,
        ComposeOptions { phase: Phase::All, dropout_seed: 7 },
    )
    .map_err(|e| e.to_string())?;
    let mut n = 2;
    for (k, v) in b.diagnostics() {
        if k.starts_with("task_") {
            worst = worst.max(v);
            n += 1;
        }
    }
    if worst < tol {
        Ok(format!("{n} task terms, max {worst:.3e}"))
    } else {
        Err(format!("max task term {worst:.3e} >= {tol:e}"))
    }
}

pub fn check_loss_identities() -> Check {
    let parts = [
        ("identity generators", check_identity_recon()),
        ("trained classifier", check_trained_relaxed(1e-3)),
        ("confident classifiers", check_confident_task_terms(1e-3)),
    ];
    let mut notes = Vec::new();
    for (what, r) in parts {
        match r {
            Ok(d) => notes.push(format!("{what}: {d}")),
            Err(d) => return Err(format!("{what}: {d}")),
        }
    }
    Ok(notes.join("; "))
}
