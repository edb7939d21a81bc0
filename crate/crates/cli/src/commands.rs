//! One function per subcommand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context as _, Result};
use headlamp::ablation::{progressive_run, run_grid, AblationGridResult, GridSpec, ProgressiveResult, ProgressiveSpec};
use headlamp::dynamism::{dynamism_report, write_heatmap, STATIC_TOP};
use headlamp::dynrag::{answer, HeadPolicy};
use headlamp::probe::{
    collect_pairs, evaluate_probe, features_from_trace, train_probe, PairDataset, ProbeMetrics, Split, TraceFeatures,
};
use headlamp::store::{load_probe, save_probe, write_csv, write_json, PolicyKind, StoredTrace};
use headlamp::task::{self, MetricKind};
use headlamp::{seed, Error};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::setup::{qa_item, Ctx};

fn csv_rows<I, R>(header: &[&str], rows: I) -> impl FnOnce(&mut dyn Write) -> headlamp::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    move |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(&header)?;
        for r in rows {
            c.write_record(r)?;
        }
        c.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn gen_traces(ctx: &Ctx) -> Result<()> {
    let traces = ctx.generate_traces()?;
    let path = ctx.write_traces(&traces)?;
    println!("{} traces, {} steps", traces.len(), traces.iter().map(|t| t.trace.len()).sum::<usize>());
    report(&path);
    Ok(())
}

pub fn stats(ctx: &Ctx) -> Result<()> {
    let traces = ctx.traces()?;
    let frames = ctx.frames(&traces)?;
    let ranking = ctx.static_ranking(&frames)?;
    let static_top = ranking.top_k(STATIC_TOP);
    let series: Vec<_> = frames
        .iter()
        .map(|fs| fs.iter().map(|f| ctx.cfg.scoring.dynamic_heads(f)).collect())
        .collect();
    let rep = dynamism_report(&series, &static_top, ctx.backend.layout())?;
    let meta = ctx.meta();
    let kind = serde_json::to_value(ctx.cfg.scoring.kind)?.as_str().unwrap_or_default().to_string();

    let table = ctx.path("table1.csv");
    let row = vec![
        ctx.model_name().to_string(),
        kind,
        ctx.cfg.scoring.threshold.to_string(),
        traces.len().to_string(),
        rep.steps.to_string(),
        rep.empty_steps.to_string(),
        opt(rep.jaccard_with_static),
        opt(rep.adjacent_jaccard),
        rep.entropy.to_string(),
    ];
    write_csv(
        &table,
        &meta,
        csv_rows(
            &["model", "score_kind", "threshold", "samples", "steps", "empty_steps", "jaccard_with_static", "adjacent_jaccard", "entropy"],
            [row],
        ),
    )?;
    report(&table);

    let rank_path = ctx.path("static_ranking.csv");
    write_csv(
        &rank_path,
        &meta,
        csv_rows(
            &["rank", "head", "mean_score"],
            ranking.entries.iter().enumerate().map(|(i, (h, s))| vec![(i + 1).to_string(), h.to_string(), s.to_string()]),
        ),
    )?;
    report(&rank_path);

    let var_path = ctx.path("variance_ranking.csv");
    write_csv(
        &var_path,
        &meta,
        csv_rows(
            &["rank", "head", "activation_variance", "activations"],
            rep.variance_ranking.iter().enumerate().map(|(i, (h, v))| {
                vec![
                    (i + 1).to_string(),
                    h.to_string(),
                    v.to_string(),
                    rep.activation_counts[ctx.backend.layout().index(*h)].to_string(),
                ]
            }),
        ),
    )?;
    report(&var_path);

    let heat = ctx.path("heatmap.csv");
    let heads: Vec<_> = rep.variance_ranking.iter().take(STATIC_TOP).map(|(h, _)| *h).collect();
    write_csv(&heat, &meta, |w| write_heatmap(w, &heads, &frames[0]))?;
    report(&heat);

    let json = ctx.path("stats.json");
    write_json(&json, &meta, &(&rep, &ranking))?;
    report(&json);
    println!(
        "entropy {:.4}, jaccard with static {}, adjacent jaccard {}",
        rep.entropy,
        opt(rep.jaccard_with_static),
        opt(rep.adjacent_jaccard)
    );
    Ok(())
}

fn static_order(ctx: &Ctx) -> Result<Vec<headlamp::HeadId>> {
    if let Some(heads) = &ctx.cfg.dynrag.static_heads {
        return Ok(heads.clone());
    }
    let traces = ctx.traces()?;
    let frames = ctx.frames(&traces)?;
    Ok(ctx.static_ranking(&frames)?.ordered(usize::MAX))
}

const GRID_JSON: &str = "grid.json";

pub fn ablate_grid(ctx: &Ctx) -> Result<()> {
    let order = static_order(ctx)?;
    let static_top: Vec<_> = order.iter().take(ctx.cfg.ablation.static_top).copied().collect();
    let spec = GridSpec {
        lengths: ctx.cfg.task.lengths.clone(),
        depths: ctx.cfg.task.depths.clone(),
        runs_per_cell: ctx.cfg.task.samples,
        master_seed: ctx.cfg.seed,
    };
    let meta = ctx.meta();
    let mut results = Vec::new();
    for &cond in &ctx.cfg.ablation.conditions {
        let r = run_grid(ctx.backend.as_ref(), ctx.task.as_ref(), &spec, &ctx.cfg.scoring, cond, &static_top)?;
        let path = ctx.path(&format!("grid_{}.csv", cond.name()));
        write_csv(&path, &meta, |w| r.write_matrix(w))?;
        report(&path);
        let cells = ctx.path(&format!("grid_cells_{}.csv", cond.name()));
        write_csv(&cells, &meta, |w| r.write_cells(w))?;
        report(&cells);
        println!("{:<10} mean {}", cond.name(), opt(r.overall_mean()));
        results.push(r);
    }
    let json = ctx.path(GRID_JSON);
    write_json(&json, &meta, &results)?;
    report(&json);
    Ok(())
}

const PROGRESSIVE_JSON: &str = "progressive.json";

pub fn ablate_progressive(ctx: &Ctx) -> Result<()> {
    let order = static_order(ctx)?;
    let a = &ctx.cfg.ablation;
    let spec = ProgressiveSpec {
        k_values: a.k_values.clone(),
        runs: a.progressive_runs,
        length: a.progressive_length,
        depths: ctx.cfg.task.depths.clone(),
        master_seed: ctx.cfg.seed,
    };
    let r = progressive_run(ctx.backend.as_ref(), ctx.task.as_ref(), &spec, &ctx.cfg.scoring, &order)?;
    let meta = ctx.meta();
    let path = ctx.path("progressive.csv");
    write_csv(&path, &meta, |w| r.write_curve(w))?;
    report(&path);
    let json = ctx.path(PROGRESSIVE_JSON);
    write_json(&json, &meta, &r)?;
    report(&json);
    for row in &r.rows {
        println!("k={:<3} metric {:.3}  m {:.2}", row.k, row.mean_metric, row.mean_m);
    }
    Ok(())
}

fn features(ctx: &Ctx, traces: &[StoredTrace]) -> Result<Vec<TraceFeatures>> {
    let layout = ctx.backend.layout();
    traces
        .iter()
        .map(|st| features_from_trace(&st.trace, &st.needle, &ctx.cfg.scoring, layout).map_err(Into::into))
        .collect()
}

#[derive(Serialize)]
struct CcaRow {
    offset: usize,
    pairs: usize,
    result: Option<headlamp::probe::CcaResult>,
    error: Option<String>,
}

pub fn cca(ctx: &Ctx) -> Result<()> {
    let feats = features(ctx, &ctx.traces()?)?;
    let mut rows = Vec::new();
    for k in 0..=ctx.cfg.probe.max_offset {
        let d = collect_pairs(&feats, k, ctx.cfg.seed);
        let (result, error) = match headlamp::probe::cca(&d.hidden, &d.targets, &ctx.cfg.cca) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(CcaRow {
            offset: k,
            pairs: d.len(),
            result,
            error,
        });
    }
    let meta = ctx.meta();
    let path = ctx.path("cca.csv");
    write_csv(
        &path,
        &meta,
        csv_rows(
            &["offset", "pairs", "top1", "top10_mean", "top50_mean", "hidden_rank", "score_rank", "degenerate"],
            rows.iter().map(|r| {
                let c = r.result.as_ref();
                vec![
                    r.offset.to_string(),
                    r.pairs.to_string(),
                    opt(c.and_then(|c| c.top1())),
                    opt(c.and_then(|c| c.top10_mean())),
                    opt(c.and_then(|c| c.top50_mean())),
                    c.map(|c| c.hidden_rank.to_string()).unwrap_or_default(),
                    c.map(|c| c.score_rank.to_string()).unwrap_or_default(),
                    c.map(|c| c.degenerate.to_string()).unwrap_or_default(),
                ]
            }),
        ),
    )?;
    report(&path);
    let json = ctx.path("cca.json");
    write_json(&json, &meta, &rows)?;
    report(&json);
    Ok(())
}

const CLASSIFIER_FILE: &str = "probe_classifier.hlmp";
const REGRESSOR_FILE: &str = "probe_regressor.hlmp";

fn probe_datasets(ctx: &Ctx) -> Result<(PairDataset, PairDataset)> {
    let feats = features(ctx, &ctx.traces()?)?;
    let d = collect_pairs(&feats, ctx.cfg.probe.offset, ctx.cfg.seed);
    if d.is_empty() {
        return Err(Error::Empty("probe dataset").into());
    }
    Ok((d.binarized(ctx.cfg.scoring.threshold), d))
}

fn metric_row(name: &str, offset: usize, rows: usize, m: &ProbeMetrics) -> Vec<String> {
    let mut r = vec![name.to_string(), offset.to_string(), rows.to_string()];
    match m {
        ProbeMetrics::Classifier(c) => r.extend([
            c.threshold.to_string(),
            c.precision.to_string(),
            c.recall.to_string(),
            c.f1.to_string(),
            opt(c.auprc),
            String::new(),
            String::new(),
            String::new(),
        ]),
        ProbeMetrics::Regressor(g) => r.extend([
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            g.mse.to_string(),
            g.mae.to_string(),
            g.r2.to_string(),
        ]),
    }
    r
}

const METRIC_HEADER: [&str; 11] =
    ["probe", "offset", "test_rows", "threshold", "precision", "recall", "f1", "auprc", "mse", "mae", "r2"];

pub fn probe_train(ctx: &Ctx) -> Result<()> {
    let (binary, raw) = probe_datasets(ctx)?;
    let layout = ctx.backend.layout();
    let p = &ctx.cfg.probe;
    let (clf, clf_report) = train_probe(&binary, layout, &p.classifier)?;
    let (reg, reg_report) = train_probe(&raw, layout, &p.regressor)?;
    save_probe(&clf, Some(&ctx.meta()), &ctx.path(CLASSIFIER_FILE))?;
    save_probe(&reg, Some(&ctx.meta()), &ctx.path(REGRESSOR_FILE))?;
    report(&ctx.path(CLASSIFIER_FILE));
    report(&ctx.path(REGRESSOR_FILE));
    let meta = ctx.meta();
    let path = ctx.path("probe_metrics.csv");
    write_csv(
        &path,
        &meta,
        csv_rows(
            &METRIC_HEADER,
            [
                metric_row("classifier", p.offset, clf_report.test_rows, &clf_report.metrics),
                metric_row("regressor", p.offset, reg_report.test_rows, &reg_report.metrics),
            ],
        ),
    )?;
    report(&path);
    let json = ctx.path("probe_train.json");
    let mut reports = BTreeMap::new();
    reports.insert("classifier", &clf_report);
    reports.insert("regressor", &reg_report);
    write_json(&json, &meta, &reports)?;
    report(&json);
    Ok(())
}

pub fn probe_eval(ctx: &Ctx) -> Result<()> {
    let (binary, raw) = probe_datasets(ctx)?;
    let mut rows = Vec::new();
    for (name, file, data) in [("classifier", CLASSIFIER_FILE, &binary), ("regressor", REGRESSOR_FILE, &raw)] {
        let path = ctx.path(file);
        let probe = load_probe(&path).with_context(|| format!("loading {} (run probe-train first)", path.display()))?;
        let m = evaluate_probe(&probe, data, Split::Test)?;
        rows.push(metric_row(name, ctx.cfg.probe.offset, data.rows(Split::Test).len(), &m));
    }
    let path = ctx.path("probe_eval.csv");
    write_csv(&path, &ctx.meta(), csv_rows(&METRIC_HEADER, rows))?;
    report(&path);
    Ok(())
}

#[derive(Serialize)]
struct PolicyRow {
    policy: String,
    questions: usize,
    accuracy: f64,
    em: f64,
    f1: f64,
    mean_retrievals: f64,
}

fn policy(ctx: &Ctx, kind: PolicyKind) -> Result<HeadPolicy> {
    let d = &ctx.cfg.dynrag;
    let layout = ctx.backend.layout();
    let policy_seed = seed::derive_seed(ctx.cfg.seed, &[u64::from(u32::MAX)]);
    Ok(match kind {
        PolicyKind::DynamicProbe => {
            let path = d.probe.as_ref().expect("validated");
            HeadPolicy::DynamicProbe {
                probe: Box::new(load_probe(path).with_context(|| format!("loading {}", path.display()))?),
                top_n: d.heads,
            }
        }
        PolicyKind::StaticTop => HeadPolicy::StaticTop(static_order(ctx)?.into_iter().take(d.heads).collect()),
        PolicyKind::DynamicRandom => HeadPolicy::DynamicRandom {
            n: d.heads,
            seed: policy_seed,
        },
        PolicyKind::FixedRandom => HeadPolicy::fixed_random(layout, d.heads, policy_seed),
        PolicyKind::NoRag => HeadPolicy::NoRag,
    })
}

pub fn dynrag(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.dynrag;
    let rind = d.rind()?;
    let t = &ctx.cfg.task;
    let mut items = Vec::new();
    for i in 0..d.questions {
        let s = seed::derive_seed(ctx.cfg.seed, &[u64::from(u32::MAX) - 1, i as u64]);
        let inst = ctx.task.instance(t.lengths[0], t.depths[i % t.depths.len()], s)?;
        items.push(qa_item(ctx, inst)?);
    }
    let logs_dir = ctx.path("dynrag_logs");
    std::fs::create_dir_all(&logs_dir)?;
    let meta = ctx.meta();
    let mut rows = Vec::new();
    for &kind in &d.policies {
        let pol = policy(ctx, kind)?;
        let (mut acc, mut em, mut f1, mut retrievals) = (0.0, 0.0, 0.0, 0usize);
        for (i, item) in items.iter().enumerate() {
            let a = answer(ctx.backend.as_ref(), &ctx.tokenizer, &item.context, &item.question, &pol, &d.params, &rind)?;
            acc += task::score(&a.text, &item.gold, MetricKind::AccuracyContains).value;
            em += task::score(&a.text, &item.gold, MetricKind::Em).value;
            f1 += task::score(&a.text, &item.gold, MetricKind::F1).value;
            retrievals += a.log.retrieve_count();
            let path = logs_dir.join(format!("{}_{i}.jsonl", pol.name()));
            let mut w = BufWriter::new(File::create(&path)?);
            w.write_all(meta.comment().as_bytes())?;
            a.log.write_jsonl(&mut w)?;
        }
        let n = items.len().max(1) as f64;
        rows.push(PolicyRow {
            policy: pol.name().to_string(),
            questions: items.len(),
            accuracy: acc / n,
            em: em / n,
            f1: f1 / n,
            mean_retrievals: retrievals as f64 / n,
        });
    }
    let path = ctx.path("dynrag.csv");
    write_csv(
        &path,
        &meta,
        csv_rows(
            &["policy", "questions", "accuracy", "em", "f1", "mean_retrievals"],
            rows.iter().map(|r| {
                vec![
                    r.policy.clone(),
                    r.questions.to_string(),
                    r.accuracy.to_string(),
                    r.em.to_string(),
                    r.f1.to_string(),
                    r.mean_retrievals.to_string(),
                ]
            }),
        ),
    )?;
    report(&path);
    write_json(&ctx.path("dynrag.json"), &meta, &rows)?;
    for r in &rows {
        println!("{:<15} accuracy {:.3}  em {:.3}  f1 {:.3}", r.policy, r.accuracy, r.em, r.f1);
    }
    Ok(())
}

#[derive(Deserialize)]
struct Stamped<T> {
    data: T,
}

fn read_stamped<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let s: Stamped<T> = serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?;
    Ok(s.data)
}

/// Collects stored results into plot-ready tables under `report/`.
pub fn report_cmd(ctx: &Ctx) -> Result<()> {
    let dir = ctx.path("report");
    std::fs::create_dir_all(&dir)?;
    let meta = ctx.meta();
    let grid_path = ctx.path(GRID_JSON);
    if !grid_path.exists() {
        return Err(anyhow::anyhow!("no grid results in {} (run ablate-grid first)", ctx.out.display()));
    }
    let grids: Vec<AblationGridResult> = read_stamped(&grid_path)?;
    for g in &grids {
        let path = dir.join(format!("fig2_{}.csv", g.condition.name()));
        write_csv(&path, &meta, |w| g.write_matrix(w))?;
        report(&path);
    }
    let summary = dir.join("ablation_summary.csv");
    write_csv(
        &summary,
        &meta,
        csv_rows(
            &["condition", "metric", "overall_mean"],
            grids.iter().map(|g| {
                vec![
                    g.condition.name().to_string(),
                    serde_json::to_value(g.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    opt(g.overall_mean()),
                ]
            }),
        ),
    )?;
    report(&summary);
    let prog_path = ctx.path(PROGRESSIVE_JSON);
    if prog_path.exists() {
        let p: ProgressiveResult = read_stamped(&prog_path)?;
        let path = dir.join("fig3_progressive.csv");
        write_csv(&path, &meta, |w| p.write_curve(w))?;
        report(&path);
    }
    Ok(())
}

/// Serves the configured in-process model over `hlb/1` on stdin/stdout.
pub fn serve(ctx: &Ctx) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    headlamp::bridge::serve_lines(ctx.backend.as_ref(), stdin.lock(), stdout.lock())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_writes_header_then_rows() {
        let mut buf = Vec::new();
        let rows = vec![vec!["1".to_string(), opt(Some(0.5))], vec!["2".to_string(), opt(None)]];
        csv_rows(&["k", "v"], rows)(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,v\n1,0.5\n2,\n");
    }
}
