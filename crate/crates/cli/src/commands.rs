use std::io::Write;
use std::path::Path;

use serde_json::json;
use tag_core::backend::{Backend, MockVocabModel, PriorScoreFile};
use tag_core::eval::{
    mann_whitney_u_with, run_experiment, AggregateReport, ExperimentData, MannWhitneyMethod,
    MetricReport,
};
use tag_core::graph::{build_normalized_adjacency, load_edge_list, NormalizedAdjacency};
use tag_core::prompt::{
    assemble_score_matrix, load_class_file, prior_logits, write_predictions, LabelVocab, NodeTexts,
    PromptTemplate,
};
use tag_core::synth::{generate_synthetic, SyntheticParams};
use tag_core::{Error, ScoreMatrix};

use crate::options::{
    resolve, CliError, CliResult, Command, EvalArgs, FewShotArgs, MethodArg, PlgArgs, Resolved,
    ScoreArgs, SignificanceArgs, SweepArgs, SweepParam, SynthArgs, TableFormat, ZeroShotArgs,
};

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Synth(args) => synth(args),
        Command::Score(args) => score(args),
        Command::ZeroShot(args) => zero_shot(args),
        Command::FewShot(args) => few_shot(args),
        Command::Eval(args) => eval(args),
        Command::Significance(args) => significance(args),
        Command::Sweep(args) => sweep(args),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: path.to_owned(),
            source: e,
        })
    })
}

fn write_prediction_file(path: &Path, predictions: &[usize]) -> CliResult {
    let mut buf = Vec::new();
    write_predictions(predictions, &mut buf).expect("writing to memory");
    write_file(path, &buf)
}

/// Prints `value` as JSON and optionally mirrors it into `path`.
fn emit_json(value: &impl serde::Serialize, path: Option<&Path>) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    print!("{text}");
    std::io::stdout().flush().ok();
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => Ok(()),
    }
}

fn synth(args: SynthArgs) -> CliResult {
    let params = SyntheticParams {
        classes: args.classes,
        nodes_per_class: args.nodes_per_class,
        p_in: args.p_in,
        p_out: args.p_out,
        noise_words: args.noise_words,
        filler_words: args.filler_words,
    };
    let dataset = generate_synthetic(&params, args.seed)?;
    dataset.write_to_dir(&args.out_dir)?;
    eprintln!(
        "wrote {} nodes, {} directed edges, {} classes to {}",
        dataset.num_nodes(),
        dataset.graph.num_edges(),
        params.classes,
        args.out_dir.display()
    );
    Ok(())
}

fn score(args: ScoreArgs) -> CliResult {
    let backend = Backend::from_spec(&args.backend)?;
    let model = match &backend {
        Backend::Mock(m) => *m,
        _ => MockVocabModel::default(),
    };
    let texts = NodeTexts::load(&args.texts)?;
    let vocab = LabelVocab::load(&args.labels, args.label_tokens.as_deref(), &model)?;
    let tpl = PromptTemplate {
        instruction: args.instruction,
        mask_token: args.mask_token,
        ..PromptTemplate::default()
    };
    let scores = assemble_score_matrix(&texts, &vocab, &tpl, &backend)?;
    PriorScoreFile { scores }.save(&args.out)?;
    Ok(())
}

/// Prior scores plus the normalized adjacency when the run needs one.
struct Inputs {
    raw: ScoreMatrix,
    adjacency: Option<NormalizedAdjacency>,
}

fn load_inputs(plg: &PlgArgs, needs_graph: bool) -> CliResult<Inputs> {
    if needs_graph && plg.edges.is_none() {
        return Err(CliError::Usage(
            "--edges is required unless propagation is off (--no-prop or --steps 0)".into(),
        ));
    }
    let raw = PriorScoreFile::load(&plg.prior)?.scores;
    let adjacency = match &plg.edges {
        Some(path) => Some(build_normalized_adjacency(&load_edge_list(
            path,
            raw.rows(),
        )?)),
        None => None,
    };
    Ok(Inputs { raw, adjacency })
}

fn load_ground_truth(path: &Path, raw: &ScoreMatrix) -> CliResult<Vec<usize>> {
    let gt = load_class_file(path)?;
    if gt.len() != raw.rows() {
        return Err(CliError::Runtime(Error::Dimension(format!(
            "ground truth has {} entries, prior has {} nodes",
            gt.len(),
            raw.rows()
        ))));
    }
    Ok(gt)
}

fn zero_shot(args: ZeroShotArgs) -> CliResult {
    let resolved = resolve(&args.plg, None)?;
    let opts = resolved.pipeline.plg;
    let inputs = load_inputs(&args.plg, opts.propagate && opts.steps > 0)?;
    let z = prior_logits(&inputs.raw, inputs.adjacency.as_ref(), opts)?;
    let predictions = z.row_argmax();
    write_prediction_file(&args.out, &predictions)?;
    if let Some(gt_path) = &args.gt {
        let gt = load_ground_truth(gt_path, &inputs.raw)?;
        let ids: Vec<usize> = (0..gt.len()).collect();
        let report = MetricReport::compute(&predictions, &gt, &ids, z.cols(), 0)?;
        emit_json(
            &AggregateReport::from_repeats(vec![report])?,
            args.metrics_out.as_deref(),
        )?;
    }
    Ok(())
}

fn experiment(
    inputs: &Inputs,
    gt: &[usize],
    resolved: &Resolved,
) -> CliResult<tag_core::eval::ExperimentRun> {
    let data = ExperimentData {
        raw_scores: &inputs.raw,
        adjacency: inputs.adjacency.as_ref(),
        ground_truth: gt,
    };
    Ok(run_experiment(
        data,
        &resolved.pipeline,
        resolved.shots,
        resolved.repeats,
        resolved.pipeline.train.seed,
    )?)
}

fn few_shot(args: FewShotArgs) -> CliResult {
    let resolved = resolve(&args.plg, Some(&args.train))?;
    if resolved.shots == 0 {
        return Err(CliError::Usage(
            "few-shot needs --k of at least 1; use zero-shot for K=0".into(),
        ));
    }
    let opts = resolved.pipeline.plg;
    let inputs = load_inputs(&args.plg, opts.propagate && opts.steps > 0)?;
    let gt = load_ground_truth(&args.gt, &inputs.raw)?;
    let run = experiment(&inputs, &gt, &resolved)?;
    if let Some(out) = &args.out {
        write_prediction_file(out, &run.predictions[0])?;
    }
    emit_json(&run.report, args.metrics_out.as_deref())
}

fn read_ids(path: &Path) -> CliResult<Vec<usize>> {
    Ok(load_class_file(path)?)
}

fn eval(args: EvalArgs) -> CliResult {
    let pred = load_class_file(&args.pred)?;
    let gt = load_class_file(&args.gt)?;
    if pred.len() != gt.len() {
        return Err(CliError::Runtime(Error::Dimension(format!(
            "{} predictions but {} ground-truth entries",
            pred.len(),
            gt.len()
        ))));
    }
    let ids = match &args.ids {
        Some(path) => read_ids(path)?,
        None => (0..gt.len()).collect(),
    };
    let seen = pred.iter().chain(&gt).max().map_or(0, |m| m + 1);
    let classes = args.classes.unwrap_or(seen);
    if classes < seen {
        return Err(CliError::Usage(format!(
            "--classes {classes} but class index {} appears",
            seen - 1
        )));
    }
    let report = MetricReport::compute(&pred, &gt, &ids, classes, 0)?;
    emit_json(&report, args.metrics_out.as_deref())
}

fn read_sample(path: &Path) -> CliResult<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Runtime(Error::Io {
            path: path.to_owned(),
            source: e,
        })
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| {
                CliError::Runtime(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

fn significance(args: SignificanceArgs) -> CliResult {
    let a = read_sample(&args.a)?;
    let b = read_sample(&args.b)?;
    let method = match args.method {
        MethodArg::Auto => MannWhitneyMethod::Auto,
        MethodArg::Exact => MannWhitneyMethod::Exact,
        MethodArg::Normal => MannWhitneyMethod::Normal,
    };
    let result = mann_whitney_u_with(&a, &b, method)?;
    emit_json(&result, args.out.as_deref())
}

fn sweep(args: SweepArgs) -> CliResult {
    let base = resolve(&args.plg, Some(&args.train))?;
    let mut runs = Vec::with_capacity(args.values.len());
    for raw in &args.values {
        let raw = raw.trim();
        let bad = |e: &dyn std::fmt::Display| {
            CliError::Usage(format!("invalid sweep value {raw:?}: {e}"))
        };
        let mut resolved = base.clone();
        match args.param {
            SweepParam::Steps => resolved.pipeline.plg.steps = raw.parse().map_err(|e| bad(&e))?,
            SweepParam::NE => resolved.pipeline.train.n_e = raw.parse().map_err(|e| bad(&e))?,
            SweepParam::Alpha => {
                resolved.pipeline.train.alpha = raw.parse().map_err(|e| bad(&e))?
            }
        }
        resolved.pipeline.train.validate()?;
        runs.push((raw.to_owned(), resolved));
    }
    let needs_graph = runs
        .iter()
        .any(|(_, r)| r.pipeline.plg.propagate && r.pipeline.plg.steps > 0);
    let inputs = load_inputs(&args.plg, needs_graph)?;
    let gt = load_ground_truth(&args.gt, &inputs.raw)?;

    let name = match args.param {
        SweepParam::Steps => "steps",
        SweepParam::NE => "n_e",
        SweepParam::Alpha => "alpha",
    };
    let mut rows = Vec::with_capacity(runs.len());
    for (value, resolved) in &runs {
        let report = experiment(&inputs, &gt, resolved)?.report;
        rows.push((value.clone(), report));
    }
    let text = match args.format {
        TableFormat::Tsv => {
            let mut out = format!("{name}\tacc_mean\tacc_std\tf1_mean\tf1_std\n");
            for (value, r) in &rows {
                out.push_str(&format!(
                    "{value}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    r.acc_mean, r.acc_std, r.f1_mean, r.f1_std
                ));
            }
            out
        }
        TableFormat::Json => {
            let table: Vec<_> = rows
                .iter()
                .map(|(value, r)| {
                    json!({
                        "param": name,
                        "value": value,
                        "acc_mean": r.acc_mean,
                        "acc_std": r.acc_std,
                        "f1_mean": r.f1_mean,
                        "f1_std": r.f1_std,
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&table).expect("table serializes");
            s.push('\n');
            s
        }
    };
    match &args.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
