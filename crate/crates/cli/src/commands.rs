//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;
use transmod::data::{load_csv, write_csv_to, CsvSchema, Dataset, Profile, Value};
use transmod::fit::{confint, mle, odds_ratios, FitError, FitOptions, FittedModel};
use transmod::forest::{fit_forest, write_importance, write_pdp, ForestControl, ForestError, ImportanceOptions, PdpOptions, TransformationForest};
use transmod::formula::{compile, parse, Lowered};
use transmod::model::{ModelError, ModelSpec};
use transmod::predict::{ecdf_overlay, overlay_rows, write_curves, Functional, Grid, GridRequest, PredictError, DECILES};
use transmod::simulate::{simulate as draw, SimulateError, SimulationConfig};
use transmod::tree::{fit_tree, NodeKind, PValueMethod, Split, TransformationTree, TreeControl, TreeError};

use crate::manifest::{write_json, write_text, RunManifest};
use crate::{DataArgs, FitArgs, ForestArgs, Failure, PValues, PartitionArgs, PredictArgs, SimulateArgs, TreeArgs};

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::NonMonotone { .. } => Failure::numeric(e.to_string()),
        _ => Failure::user(e.to_string()),
    }
}

fn fit_failure(e: FitError) -> Failure {
    match e {
        FitError::Options(_) | FitError::Incomparable => Failure::user(e.to_string()),
        FitError::Model(m) => model_failure(m),
        _ => Failure::numeric(e.to_string()),
    }
}

fn tree_failure(e: TreeError) -> Failure {
    match e {
        TreeError::Root(f) => fit_failure(f),
        TreeError::Model(m) => model_failure(m),
        _ => Failure::user(e.to_string()),
    }
}

fn forest_failure(e: ForestError) -> Failure {
    match e {
        ForestError::Tree { index, source } => match tree_failure(source) {
            Failure::User(m) => Failure::user(format!("tree {index}: {m}")),
            Failure::Numeric(m) => Failure::numeric(format!("tree {index}: {m}")),
        },
        ForestError::Routing(t) => tree_failure(t),
        ForestError::Fit(_) | ForestError::Model(_) => Failure::numeric(e.to_string()),
        ForestError::Predict(p) => predict_failure(p),
        _ => Failure::user(e.to_string()),
    }
}

fn predict_failure(e: PredictError) -> Failure {
    match e {
        PredictError::Bracket(_) => Failure::numeric(e.to_string()),
        PredictError::Model(m) => model_failure(m),
        _ => Failure::user(e.to_string()),
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::user(format!("{}: {e}", path.display()))
}

fn comma_list(s: &str) -> Vec<String> {
    s.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}

/// `key=a,b` or plain `a,b`.
fn keyed_list(s: &str, key: &str) -> Result<Vec<String>, Failure> {
    let body = match s.split_once('=') {
        Some((k, v)) if k.trim() == key => v,
        Some((k, _)) => return Err(Failure::user(format!("expected {key}=..., found {k}=..."))),
        None => s,
    };
    let list = comma_list(body);
    if list.is_empty() {
        return Err(Failure::user(format!("empty {key} list")));
    }
    Ok(list)
}

fn load(a: &DataArgs) -> Result<(Dataset, Lowered), Failure> {
    let ast = parse(&a.formula).map_err(|e| Failure::user(format!("formula: {e}")))?;
    let mut schema = CsvSchema::new(ast.response.clone());
    schema.weight = a.weights.clone();
    for spec in &a.levels {
        let (col, levels) = spec
            .split_once('=')
            .ok_or_else(|| Failure::user(format!("--levels expects COL=a,b,c, found {spec:?}")))?;
        schema.levels.insert(col.trim().to_string(), comma_list(levels));
    }
    let d = load_csv(&a.data, &schema).map_err(|e| Failure::user(format!("{}: {e}", a.data.display())))?;
    let lowered = compile(&a.formula, &d).map_err(|e| Failure::user(format!("formula: {e}")))?;
    Ok((d, lowered))
}

fn data_manifest(command: &str, a: &DataArgs, seed: u64) -> Result<RunManifest, Failure> {
    let mut m = RunManifest::new(command, seed)
        .input(&a.data)?
        .option("weights", &a.weights)
        .option("levels", &a.levels);
    m.formula = Some(a.formula.clone());
    Ok(m)
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

pub fn fit(a: &FitArgs) -> Result<(), Failure> {
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(Failure::user(format!("--level {} outside (0, 1)", a.level)));
    }
    let overlay = a.overlay.as_deref().map(|s| keyed_list(s, "strata")).transpose()?;
    let (d, lowered) = load(&a.data)?;
    let manifest = data_manifest("fit", &a.data, a.run.seed)?
        .option("level", a.level)
        .option("overlay", &overlay);
    let fm = mle(&lowered.spec, &d, &FitOptions::default()).map_err(fit_failure)?;
    let ci = confint(&fm, a.level).map_err(fit_failure)?;
    let ors = odds_ratios(&fm, a.level).map_err(fit_failure)?;
    let se = fm.std_errors();
    out_dir(&a.run.out)?;

    let parameters: Vec<_> = ci
        .iter()
        .zip(&se)
        .map(|(c, s)| {
            json!({
                "name": c.name,
                "estimate": c.estimate,
                "std_error": s,
                "lower": c.lower,
                "upper": c.upper,
                "unreliable": c.unreliable,
            })
        })
        .collect();
    write_json(
        &a.run.out.join("params.json"),
        &manifest,
        json!({
            "formula": a.data.formula,
            "observations": d.n(),
            "total_weight": d.total_weight(),
            "loglik": fm.loglik,
            "level": a.level,
            "parameters": parameters,
            "odds_ratios": ors,
            "model": fm,
        }),
    )?;

    let mut s = String::new();
    summary_header(&mut s, &a.data.formula, &d, &fm);
    let _ = writeln!(s, "\n{:<40} {:>12} {:>12} {:>12} {:>12}", "parameter", "estimate", "std.error", "lower", "upper");
    for (c, e) in ci.iter().zip(&se) {
        let flag = if c.unreliable { "  (constraint active)" } else { "" };
        let _ = writeln!(s, "{:<40} {:>12.6} {:>12.6} {:>12.6} {:>12.6}{flag}", c.name, c.estimate, e, c.lower, c.upper);
    }
    if let Some(ors) = ors.as_ref().filter(|o| !o.is_empty()) {
        let _ = writeln!(s, "\nodds ratios with {}% intervals", a.level * 100.0);
        for c in ors {
            let _ = writeln!(s, "{:<40} {:>12.6} {:>12.6} {:>12.6}", c.name, c.estimate, c.lower, c.upper);
        }
    }
    if let Some(vars) = &overlay {
        let cells = ecdf_overlay(&fm.spec, &fm.theta, &d, vars).map_err(predict_failure)?;
        let _ = writeln!(s, "\nsup |ECDF - model CDF| per cell");
        for c in &cells {
            let _ = writeln!(s, "{:<40} {:>12.6}", c.label, c.sup_distance);
        }
        let mut buf = Vec::new();
        write_curves(&overlay_rows(&cells), &mut buf).map_err(predict_failure)?;
        write_text(&a.run.out.join("curves.csv"), &manifest, &buf)?;
    }
    write_text(&a.run.out.join("summary.txt"), &manifest, s.as_bytes())
}

fn summary_header(s: &mut String, formula: &str, d: &Dataset, fm: &FittedModel) {
    let _ = writeln!(s, "formula: {formula}");
    let _ = writeln!(s, "observations: {} (total weight {})", d.n(), d.total_weight());
    let _ = writeln!(s, "log-likelihood: {:.6}", fm.loglik);
    let _ = writeln!(s, "parameters: {}", fm.n_params());
    let _ = writeln!(
        s,
        "convergence: {} after {} iterations, max |score|/W = {:.3e}",
        fm.report.criterion, fm.report.iterations, fm.report.gradient
    );
}

fn split_vars(part: &PartitionArgs, d: &Dataset, spec: &ModelSpec) -> Result<Vec<String>, Failure> {
    let vars = match &part.vars {
        Some(v) => comma_list(v),
        None => d.names().iter().filter(|n| !spec.variables().contains(n)).cloned().collect(),
    };
    if vars.is_empty() {
        return Err(Failure::user("no split variables"));
    }
    Ok(vars)
}

fn pvalue_method(p: PValues, resamples: usize) -> PValueMethod {
    match p {
        PValues::Permutation => PValueMethod::MonteCarlo { resamples },
        PValues::Asymptotic => PValueMethod::Asymptotic,
    }
}

/// importance.csv and, when requested, pdp.csv.
fn partition_tables(f: &TransformationForest, d: &Dataset, part: &PartitionArgs, seed: u64, out: &Path, manifest: &RunManifest) -> Result<(), Failure> {
    let predictor = f.predictor(d).map_err(forest_failure)?;
    let imp = predictor
        .var_importance(&ImportanceOptions {
            permutations: part.permutations,
            seed,
            out_of_bag: part.oob,
        })
        .map_err(forest_failure)?;
    let mut buf = Vec::new();
    write_importance(&imp, &mut buf).map_err(forest_failure)?;
    write_text(&out.join("importance.csv"), manifest, &buf)?;
    if let Some(p) = &part.pdp {
        let vars = keyed_list(p, "vars")?;
        let grids = vars
            .iter()
            .map(|v| predictor.default_grid(v, part.pdp_points))
            .collect::<Result<Vec<_>, _>>()
            .map_err(forest_failure)?;
        let opts = PdpOptions {
            rows: part.pdp_rows,
            numeric_points: part.pdp_points,
        };
        let rows = predictor.partial_dependence(&vars, &grids, &opts).map_err(forest_failure)?;
        let mut buf = Vec::new();
        write_pdp(&vars, &rows, &f.spec.response, &mut buf).map_err(forest_failure)?;
        write_text(&out.join("pdp.csv"), manifest, &buf)?;
    }
    Ok(())
}

fn partition_manifest(m: RunManifest, part: &PartitionArgs, vars: &[String]) -> RunManifest {
    m.option("vars", vars)
        .option("max_depth", part.max_depth)
        .option("pdp", &part.pdp)
        .option("pdp_rows", part.pdp_rows)
        .option("pdp_points", part.pdp_points)
        .option("permutations", part.permutations)
        .option("oob", part.oob)
}

fn describe_split(split: &Split) -> String {
    match split {
        Split::Numeric { variable, cutpoint } => format!("{variable} <= {cutpoint}"),
        Split::Categorical { variable, left, .. } => format!("{variable} in {{{}}}", left.join(", ")),
    }
}

fn tree_lines(t: &TransformationTree, s: &mut String) {
    for node in t.nodes() {
        let indent = "  ".repeat(node.depth);
        match &node.kind {
            NodeKind::Inner { split, .. } => {
                let p = node.test.as_ref().map(|t| t.adjusted).unwrap_or(f64::NAN);
                let _ = writeln!(s, "{indent}[{}] n={} split {} (adjusted p = {p:.4})", node.id, node.weight, describe_split(split));
            }
            NodeKind::Leaf { reason } => {
                let _ = writeln!(s, "{indent}[{}] n={} leaf ({reason:?}) loglik {:.6}", node.id, node.weight, node.model.loglik);
            }
        }
    }
}

pub fn tree(a: &TreeArgs) -> Result<(), Failure> {
    let (d, lowered) = load(&a.data)?;
    let vars = split_vars(&a.part, &d, &lowered.spec)?;
    let manifest = partition_manifest(data_manifest("tree", &a.data, a.run.seed)?, &a.part, &vars)
        .option("alpha", a.alpha)
        .option("min_split", a.min_split)
        .option("min_bucket", a.min_bucket)
        .option("pvalues", format!("{:?}", a.pvalues))
        .option("resamples", a.resamples);
    let ctrl = TreeControl {
        alpha: a.alpha,
        min_split: a.min_split,
        min_bucket: a.min_bucket,
        max_depth: a.part.max_depth,
        seed: a.run.seed,
        pvalue: pvalue_method(a.pvalues, a.resamples),
        mtry: None,
        fit: FitOptions::default(),
    };
    let t = fit_tree(&d, &lowered.spec, &vars, &ctrl).map_err(tree_failure)?;
    let loglik = t.loglik(&d).map_err(tree_failure)?;
    out_dir(&a.run.out)?;
    write_json(
        &a.run.out.join("model.json"),
        &manifest,
        json!({ "formula": a.data.formula, "loglik": loglik, "tree": t }),
    )?;
    let mut s = String::new();
    let _ = writeln!(s, "formula: {}", a.data.formula);
    let _ = writeln!(s, "observations: {} (total weight {})", d.n(), d.total_weight());
    let _ = writeln!(s, "root log-likelihood: {:.6}", t.root.model.loglik);
    let _ = writeln!(s, "tree log-likelihood: {loglik:.6}");
    let _ = writeln!(s, "leaves: {}, depth: {}\n", t.leaves().len(), t.depth());
    tree_lines(&t, &mut s);
    write_text(&a.run.out.join("summary.txt"), &manifest, s.as_bytes())?;
    let f = TransformationForest::from_tree(t, &d).map_err(forest_failure)?;
    partition_tables(&f, &d, &a.part, a.run.seed, &a.run.out, &manifest)
}

pub fn forest(a: &ForestArgs) -> Result<(), Failure> {
    let (d, lowered) = load(&a.data)?;
    let vars = split_vars(&a.part, &d, &lowered.spec)?;
    let mtry = match a.mtry.as_deref() {
        None => None,
        Some("all") => Some(vars.len()),
        Some(m) => Some(m.parse().map_err(|_| Failure::user(format!("--mtry expects a number or all, found {m:?}")))?),
    };
    let manifest = partition_manifest(data_manifest("forest", &a.data, a.run.seed)?, &a.part, &vars)
        .option("trees", a.trees)
        .option("fraction", a.fraction)
        .option("mtry", mtry)
        .option("alpha", a.alpha)
        .option("min_split", a.min_split)
        .option("min_bucket", a.min_bucket)
        .option("pvalues", format!("{:?}", a.pvalues))
        .option("resamples", a.resamples);
    let ctrl = ForestControl {
        trees: a.trees,
        fraction: a.fraction,
        mtry,
        tree: TreeControl {
            alpha: a.alpha,
            min_split: a.min_split,
            min_bucket: a.min_bucket,
            max_depth: a.part.max_depth,
            seed: a.run.seed,
            pvalue: pvalue_method(a.pvalues, a.resamples),
            mtry: None,
            fit: FitOptions::default(),
        },
        seed: a.run.seed,
    };
    let f = fit_forest(&d, &lowered.spec, &vars, &ctrl).map_err(forest_failure)?;
    let loglik = f.predictor(&d).and_then(|p| p.loglik(&d)).map_err(forest_failure)?;
    let unconditional = mle(&lowered.spec, &d, &FitOptions::default()).map_err(fit_failure)?;
    out_dir(&a.run.out)?;
    write_json(
        &a.run.out.join("model.json"),
        &manifest,
        json!({ "formula": a.data.formula, "loglik": loglik, "forest": f }),
    )?;
    let mut s = String::new();
    let _ = writeln!(s, "formula: {}", a.data.formula);
    let _ = writeln!(s, "observations: {} (total weight {})", d.n(), d.total_weight());
    let _ = writeln!(s, "trees: {}", f.trees.len());
    let leaves: usize = f.trees.iter().map(|t| t.tree.leaves().len()).sum();
    let _ = writeln!(s, "mean leaves per tree: {:.2}", leaves as f64 / f.trees.len() as f64);
    let _ = writeln!(s, "unconditional log-likelihood: {:.6}", unconditional.loglik);
    let _ = writeln!(s, "in-sample forest log-likelihood: {loglik:.6}");
    write_text(&a.run.out.join("summary.txt"), &manifest, s.as_bytes())?;
    partition_tables(&f, &d, &a.part, a.run.seed, &a.run.out, &manifest)
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    if a.n <= 0 {
        return Err(Failure::user(format!("--n must be positive, found {}", a.n)));
    }
    let cfg = SimulationConfig {
        n: a.n as usize,
        seed: a.seed,
        effects: a.effects,
        survey_weights: a.survey_weights,
    };
    let d = draw(&cfg).map_err(|e: SimulateError| Failure::user(e.to_string()))?;
    let manifest = RunManifest::new("simulate", a.seed)
        .option("n", a.n)
        .option("effects", a.effects)
        .option("survey_weights", a.survey_weights);
    let mut buf = Vec::new();
    write_csv_to(&d, &mut buf).map_err(|e| Failure::user(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    write_text(&a.out, &manifest, &buf)
}

/// `sex=male,age=30`: numbers become numeric values, anything else a level.
fn parse_profile(s: &str) -> Result<Profile, Failure> {
    let mut p = Profile::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::user(format!("profile entry {item:?} is not name=value")))?;
        let value = match v.trim().parse::<f64>() {
            Ok(x) => Value::Num(x),
            Err(_) => Value::Level(v.trim().to_string()),
        };
        p.set(k.trim().to_string(), value);
    }
    Ok(p)
}

pub fn predict(a: &PredictArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.model).map_err(io(&a.model))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::user(format!("{}: {e}", a.model.display())))?;
    let fm: FittedModel = serde_json::from_value(doc.get("model").cloned().unwrap_or_default())
        .map_err(|e| Failure::user(format!("{}: no fitted model: {e}", a.model.display())))?;
    let functionals = comma_list(&a.functionals)
        .iter()
        .map(|f| Functional::parse(f).ok_or_else(|| Failure::user(format!("unknown functional {f:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let profiles = if a.profile.is_empty() {
        vec![Profile::new()]
    } else {
        a.profile.iter().map(|p| parse_profile(p)).collect::<Result<_, _>>()?
    };
    let mut manifest = RunManifest::new("predict", 1)
        .input(&a.model)?
        .option("profiles", &a.profile)
        .option("functionals", &a.functionals)
        .option("grid_points", a.grid_points);
    manifest.formula = fm.spec.formula.clone();
    let req = GridRequest {
        grid: Grid::Count(a.grid_points),
        profiles,
        functionals,
        probabilities: DECILES.to_vec(),
    };
    let rows = req.rows(&fm.spec, &fm.theta).map_err(predict_failure)?;
    let mut buf = Vec::new();
    write_curves(&rows, &mut buf).map_err(predict_failure)?;
    out_dir(&a.out)?;
    write_text(&a.out.join("curves.csv"), &manifest, &buf)
}
