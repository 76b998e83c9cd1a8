use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ensemserve_core::cost::predict_ensemble_throughput;
use ensemserve_core::optimizer::{
    bbs_baseline, count_total_matrices, count_total_neighs, optimize as run_optimizer, worst_fit_decreasing,
    AnalyticBench, CombinatoricsReport, CountingScorer, GreedyConfig, Scorer,
};
use ensemserve_core::runtime::{
    bench as run_bench, Backend, CombinationRule, FakeZeroBackend, RuntimeBench, SyntheticBackend,
};
use ensemserve_core::server::{self, CacheKeyInputs, Lookup, MatrixCache, MatrixCacheEntry, ServerConfig};
use ensemserve_core::{AllocationMatrix, ClusterSpec, MatrixDocument};
use serde_json::json;

use crate::report::{render_matrix, RunReport, ScoreRow};
use crate::{BackendKind, BenchKind, Common, RuleKind, ServeArgs};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

enum CliBench {
    Analytic(AnalyticBench),
    Runtime(RuntimeBench),
}

impl Scorer for CliBench {
    fn score(&self, cluster: &ClusterSpec, matrix: &AllocationMatrix) -> f64 {
        match self {
            CliBench::Analytic(b) => b.score(cluster, matrix),
            CliBench::Runtime(b) => b.score(cluster, matrix),
        }
    }
}

impl Common {
    fn load_cluster(&self) -> CliResult<ClusterSpec> {
        let paths: Vec<&PathBuf> = self.cluster.iter().chain(&self.ensemble).collect();
        if paths.is_empty() {
            return Err("no spec files: pass --cluster and --ensemble".into());
        }
        Ok(ClusterSpec::load(&paths)?)
    }

    fn greedy(&self) -> GreedyConfig {
        GreedyConfig {
            max_iter: self.max_iter,
            max_neighs: self.max_neighs,
            rng_seed: self.seed,
        }
    }

    fn default_batch(&self, cluster: &ClusterSpec) -> u32 {
        self.default_batch.unwrap_or_else(|| cluster.min_batch())
    }

    fn backend(&self) -> Arc<dyn Backend> {
        match self.bench {
            BenchKind::FakeZero => Arc::new(FakeZeroBackend),
            _ => Arc::new(SyntheticBackend::new(self.time_scale)),
        }
    }

    fn scorer(&self) -> CliBench {
        match self.bench {
            BenchKind::Analytic => CliBench::Analytic(AnalyticBench),
            _ => {
                let mut b = RuntimeBench::new(self.backend(), self.calib_samples, self.repeats);
                b.seed = self.seed;
                CliBench::Runtime(b)
            }
        }
    }

    /// Names the scorer precisely enough to key the matrix cache.
    fn bench_label(&self) -> String {
        match self.bench {
            BenchKind::Analytic => "analytic".into(),
            BenchKind::Synthetic => format!(
                "synthetic:scale={}:calib={}:repeats={}:seed={}",
                self.time_scale, self.calib_samples, self.repeats, self.seed
            ),
            BenchKind::FakeZero => format!(
                "fake-zero:calib={}:repeats={}:seed={}",
                self.calib_samples, self.repeats, self.seed
            ),
        }
    }

    fn cache_key(&self, cluster: &ClusterSpec) -> String {
        let greedy = self.greedy();
        let label = self.bench_label();
        CacheKeyInputs::new(cluster, &greedy, self.default_batch(cluster), &label).digest()
    }

    fn report(&self, command: &'static str, cluster: &ClusterSpec, started: Instant) -> RunReport {
        RunReport {
            command,
            inputs_digest: self.cache_key(cluster),
            seed: self.seed,
            bench: self.bench_label(),
            matrices_evaluated: 0,
            best_matrix: None,
            scores: Vec::new(),
            wall_time_s: started.elapsed().as_secs_f64(),
            details: json!({}),
        }
    }
}

fn load_matrix(path: &Path, cluster: &ClusterSpec) -> CliResult<AllocationMatrix> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(entry) = serde_json::from_str::<MatrixCacheEntry>(&text) {
        return Ok(AllocationMatrix::from_document(&entry.matrix, cluster)?);
    }
    let doc: MatrixDocument = serde_json::from_str(&text)?;
    Ok(AllocationMatrix::from_document(&doc, cluster)?)
}

pub fn optimize(common: &Common) -> CliResult {
    let started = Instant::now();
    let cluster = common.load_cluster()?;
    let key = common.cache_key(&cluster);
    let cache = common.cache_dir.as_ref().map(MatrixCache::new);

    if let Some(cache) = &cache {
        if let Lookup::Hit(entry, matrix) = cache.lookup(&key, &cluster) {
            let mut report = common.report("optimize", &cluster, started);
            report.best_matrix = Some(matrix.to_document(&cluster));
            report.scores.push(ScoreRow {
                label: "cached".into(),
                score: entry.score,
                bench_calls: 0,
            });
            report.details = json!({
                "cache": { "hit": true, "path": cache.path(&key), "created_at": entry.created_at },
            });
            report.wall_time_s = started.elapsed().as_secs_f64();
            report.print(common.json);
            return Ok(());
        }
    }

    let scorer = CountingScorer::new(common.scorer());
    let out = run_optimizer(&cluster, common.default_batch(&cluster), &common.greedy(), &scorer)?;
    let stored = match &cache {
        Some(cache) => Some(cache.store(&MatrixCacheEntry::new(
            key.clone(),
            &out.best,
            &cluster,
            out.trace.final_score,
        ))?),
        None => None,
    };

    let mut report = common.report("optimize", &cluster, started);
    report.matrices_evaluated = scorer.calls();
    report.best_matrix = Some(out.best.to_document(&cluster));
    report.scores = vec![
        ScoreRow {
            label: "A1 (worst-fit)".into(),
            score: out.trace.start_score,
            bench_calls: 1,
        },
        ScoreRow {
            label: "A1+A2 (greedy)".into(),
            score: out.trace.final_score,
            bench_calls: out.trace.bench_calls,
        },
    ];
    report.details = json!({
        "initial_matrix": out.initial.to_document(&cluster),
        "trace": out.trace,
        "cache": { "hit": false, "path": stored },
    });
    report.wall_time_s = started.elapsed().as_secs_f64();
    report.print(common.json);
    Ok(())
}

pub fn bench(common: &Common, matrix_path: &Path) -> CliResult {
    let started = Instant::now();
    let cluster = common.load_cluster()?;
    let matrix = load_matrix(matrix_path, &cluster)?;
    let analytic = predict_ensemble_throughput(&matrix, &cluster);

    let mut report = common.report("bench", &cluster, started);
    report.best_matrix = Some(matrix.to_document(&cluster));
    report.scores.push(ScoreRow {
        label: "analytic".into(),
        score: analytic,
        bench_calls: 1,
    });
    report.matrices_evaluated = 1;
    if common.bench != BenchKind::Analytic {
        let calib = match common.scorer() {
            CliBench::Runtime(b) => b.calibration(&cluster),
            CliBench::Analytic(_) => unreachable!(),
        };
        let outcome = run_bench(&matrix, calib, &cluster, common.backend(), common.repeats)?;
        report.scores.push(ScoreRow {
            label: "measured".into(),
            score: outcome.score,
            bench_calls: 1,
        });
        report.details = json!({
            "rsd": outcome.result.as_ref().map(|r| r.rsd),
            "runs": outcome.result.as_ref().map(|r| r.runs.clone()),
            "infeasible": outcome.infeasible,
        });
        report.matrices_evaluated = 2;
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    report.print(common.json);
    Ok(())
}

pub fn count(common: &Common, shape: Option<&[u32]>) -> CliResult {
    let started = Instant::now();
    if let Some(shape) = shape {
        let &[b, d, m] = shape else {
            return Err(format!("--shape takes MENU,DEVICES,MODELS, got {} values", shape.len()).into());
        };
        let total = count_total_matrices(b, d, m);
        let (b, d, m) = (u64::from(b), u64::from(d), u64::from(m));
        let report = json!({
            "command": "count",
            "menu_size": b,
            "devices": d,
            "models": m,
            "total_matrices": total.to_string(),
            "formula_neighbors_min": count_total_neighs(b, d, m, m),
            "formula_neighbors_max": count_total_neighs(b, d, m, 0),
        });
        if common.json {
            println!("{}", serde_json::to_string_pretty(&report)?);
        } else {
            println!("shape          B={b} D={d} M={m}");
            println!("total matrices {total}");
            println!(
                "neighbors      {}..{} (F = {m}..0)",
                report["formula_neighbors_min"], report["formula_neighbors_max"]
            );
        }
        return Ok(());
    }

    let cluster = common.load_cluster()?;
    let matrix = worst_fit_decreasing(&cluster, common.default_batch(&cluster))?;
    let combi = CombinatoricsReport::new(&cluster, &matrix);
    let mut report = common.report("count", &cluster, started);
    report.best_matrix = Some(matrix.to_document(&cluster));
    if !common.json {
        println!("shape          B={} D={} M={}", combi.menu_size, combi.devices, combi.models);
        println!(
            "total matrices {} (~{:.3e})",
            combi.total_matrices, combi.total_matrices_approx
        );
        println!(
            "neighbors      {}..{} by formula, F = {}..0",
            combi.formula_neighbors_min, combi.formula_neighbors_max, combi.models
        );
        println!(
            "at worst-fit   formula {} with F = {}, enumerated {}, delta {}",
            combi.formula_neighbors_at_matrix, combi.forbidden, combi.enumerated_neighbors, combi.delta
        );
        print!("\n{}", render_matrix(report.best_matrix.as_ref().unwrap()));
        return Ok(());
    }
    report.details = serde_json::to_value(&combi)?;
    report.wall_time_s = started.elapsed().as_secs_f64();
    report.print(true);
    Ok(())
}

pub fn baseline(common: &Common) -> CliResult {
    let started = Instant::now();
    let cluster = common.load_cluster()?;

    let bbs_scorer = CountingScorer::new(common.scorer());
    let bbs = bbs_baseline(&cluster, &bbs_scorer);
    let bbs_search_calls = bbs_scorer.calls();

    let opt_scorer = CountingScorer::new(common.scorer());
    let opt = run_optimizer(&cluster, common.default_batch(&cluster), &common.greedy(), &opt_scorer)?;

    let mut report = common.report("baseline", &cluster, started);
    report.best_matrix = Some(opt.best.to_document(&cluster));
    let bbs_details = match &bbs {
        Ok(outcome) => {
            // one more run scores the assembled matrix
            let score = bbs_scorer.score(&cluster, &outcome.matrix);
            report.scores.push(ScoreRow {
                label: "BBS baseline".into(),
                score,
                bench_calls: outcome.bench_calls,
            });
            json!({
                "applicable": true,
                "matrix": outcome.matrix.to_document(&cluster),
                "choices": outcome.choices,
                "scan_calls": bbs_search_calls,
                "final_scoring_calls": bbs_scorer.calls() - bbs_search_calls,
            })
        }
        Err(e) => json!({ "applicable": false, "reason": e.to_string() }),
    };
    report.scores.push(ScoreRow {
        label: "optimizer".into(),
        score: opt.trace.final_score,
        bench_calls: opt.trace.bench_calls,
    });
    report.matrices_evaluated = bbs_scorer.calls() + opt_scorer.calls();
    report.details = json!({ "bbs": bbs_details, "trace": opt.trace });
    report.wall_time_s = started.elapsed().as_secs_f64();
    if !common.json {
        if let Err(e) = &bbs {
            println!("BBS baseline not applicable: {e}");
        }
    }
    report.print(common.json);
    Ok(())
}

pub fn serve(common: &Common, args: &ServeArgs) -> CliResult {
    let cluster = common.load_cluster()?;
    let (matrix, source) = match &args.matrix {
        Some(path) => (load_matrix(path, &cluster)?, format!("file {}", path.display())),
        None => {
            let Some(dir) = &common.cache_dir else {
                return Err("no matrix: pass --matrix, or --cache-dir after running `ensemserve optimize` \
                            with the same specs and search flags"
                    .into());
            };
            let cache = MatrixCache::new(dir);
            let key = common.cache_key(&cluster);
            match cache.lookup(&key, &cluster) {
                Lookup::Hit(_, matrix) => (matrix, format!("cache {}", cache.path(&key).display())),
                _ => {
                    return Err(format!(
                        "no cached matrix for these inputs in {}; run `ensemserve optimize` with the same \
                         specs and search flags first, or pass --matrix",
                        dir.display()
                    )
                    .into())
                }
            }
        }
    };
    let rule = match args.rule {
        RuleKind::Avg => CombinationRule::Averaging,
        RuleKind::Vote => CombinationRule::MajorityVote,
        RuleKind::Wavg => CombinationRule::WeightedAveraging(args.weights.clone()),
    };
    let backend: Arc<dyn Backend> = match args.backend {
        BackendKind::Synthetic => Arc::new(SyntheticBackend::new(common.time_scale)),
        BackendKind::FakeZero => Arc::new(FakeZeroBackend),
    };
    let config = ServerConfig {
        bind: args.bind,
        flush_timeout: Duration::from_millis(args.flush_timeout_ms),
        rule,
        ..ServerConfig::default()
    };
    let startup = config.pool.startup_timeout + Duration::from_secs(5);
    let mut handle = server::start(&matrix, cluster.clone(), backend, config)?;
    let announce = json!({
        "listening": handle.local_addr().to_string(),
        "matrix_source": source,
        "bench_calls": 0,
        "matrix": matrix.to_document(&cluster),
    });
    if common.json {
        println!("{announce}");
    } else {
        println!("listening on {} (matrix from {source})", handle.local_addr());
        print!("{}", render_matrix(&matrix.to_document(&cluster)));
    }
    if let Err(e) = handle.wait_ready(startup) {
        handle.shutdown();
        return Err(e.into());
    }
    if !common.json {
        println!("ready");
    }
    handle.join();
    Ok(())
}
