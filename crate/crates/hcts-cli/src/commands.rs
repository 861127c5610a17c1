//! Subcommand implementations. Every output artifact embeds the config echo
//! and seed so runs can be reproduced from their outputs alone.

use crate::config::RunConfigFile;
use hcts_core::data::{
    build_cross_domain, gen_synthetic_graphs, load_interactions, long_tail_report,
    write_interactions, CrossDomainDataset, InteractionGraph,
};
use hcts_core::error::{Error, Result};
use hcts_core::evaluation::{evaluate, EvalOptions};
use hcts_core::geometry;
use hcts_core::model::{
    forward_all, load_checkpoint, save_checkpoint, CheckpointMeta, ModelParams,
};
use hcts_core::trainer::{train, TrainConfig};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Ctx {
    pub cfg: RunConfigFile,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Ctx {
    pub fn new(mut cfg: RunConfigFile, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        let seed = cfg.train.seed;
        let out_dir = out
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Self { cfg, out_dir, seed })
    }

    fn provenance(&self) -> serde_json::Value {
        json!({ "config": self.cfg.echo(), "seed": self.seed })
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::data(format!("serialization failed: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn load_graphs(&self) -> Result<(InteractionGraph, InteractionGraph)> {
        let data = &self.cfg.data;
        let src_path = data
            .source_interactions
            .as_ref()
            .ok_or_else(|| Error::usage("config is missing data.source_interactions"))?;
        let tgt_path = data
            .target_interactions
            .as_ref()
            .ok_or_else(|| Error::usage("config is missing data.target_interactions"))?;
        let src = load_interactions(src_path, data.min_user_degree, data.min_item_degree)?;
        let tgt = load_interactions(tgt_path, data.min_user_degree, data.min_item_degree)?;
        Ok((src, tgt))
    }

    fn load_dataset(&self) -> Result<CrossDomainDataset> {
        let (src, tgt) = self.load_graphs()?;
        CrossDomainDataset::build(&src, &tgt, self.seed)
    }
}

/// Generate the synthetic dataset files and their manifest.
pub fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let synth = ctx
        .cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::usage("config has no synthetic block"))?;
    let pair = gen_synthetic_graphs(synth, ctx.seed)?;
    let src_path = ctx.out_dir.join("source_interactions.tsv");
    let tgt_path = ctx.out_dir.join("target_interactions.tsv");
    write_interactions(&pair.source, &src_path)?;
    write_interactions(&pair.target, &tgt_path)?;
    let overlap = build_cross_domain(&pair.source, &pair.target);
    let overlap_users: Vec<&str> = overlap
        .pairs
        .iter()
        .map(|&(su, _)| pair.source.external_user_ids()[su as usize].as_str())
        .collect();
    let manifest = json!({
        "config": ctx.cfg.echo(),
        "seed": ctx.seed,
        "source_interactions": src_path,
        "target_interactions": tgt_path,
        "source_edges": pair.source.num_edges(),
        "target_edges": pair.target.num_edges(),
        "overlap_users": overlap_users,
    });
    let manifest_path = ctx.write_json("manifest.json", &manifest)?;
    println!(
        "synth: wrote {} ({} edges), {} ({} edges), {}",
        src_path.display(),
        pair.source.num_edges(),
        tgt_path.display(),
        pair.target.num_edges(),
        manifest_path.display()
    );
    Ok(())
}

/// Train and write the final/best checkpoints plus the epoch history log.
pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let ds = ctx.load_dataset()?;
    let cfg = &ctx.cfg.train;
    let result = train(cfg, &ds)?;
    let meta = CheckpointMeta {
        seed: ctx.seed,
        step: result.steps,
    };
    let final_path = ctx.out_dir.join("checkpoint.bin");
    let best_path = ctx.out_dir.join("checkpoint_best.bin");
    save_checkpoint(&result.params, meta, &final_path)?;
    save_checkpoint(&result.best_params, meta, &best_path)?;

    let history_path = ctx.out_dir.join("history.jsonl");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&history_path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", history_path.display())))?,
    );
    let fail = |e: std::io::Error| Error::data(format!("history write failed: {e}"));
    writeln!(
        out,
        "{}",
        serde_json::to_string(&ctx.provenance()).expect("provenance serializes")
    )
    .map_err(fail)?;
    for record in &result.history.epochs {
        writeln!(
            out,
            "{}",
            serde_json::to_string(record).expect("epoch record serializes")
        )
        .map_err(fail)?;
    }
    out.flush().map_err(fail)?;

    let last = result.history.epochs.last().expect("at least one epoch");
    println!(
        "train: {} epochs, final total loss {:.6}, K_S {:.4}, K_T {:.4}; wrote {}, {}, {}",
        result.history.epochs.len(),
        last.loss.total,
        last.k_src,
        last.k_tgt,
        final_path.display(),
        best_path.display(),
        history_path.display()
    );
    Ok(())
}

fn check_checkpoint_matches(params: &ModelParams, ds: &CrossDomainDataset, cfg: &TrainConfig) -> Result<()> {
    if params.dim != cfg.dim {
        return Err(Error::usage(format!(
            "checkpoint dim {} does not match config dim {}",
            params.dim, cfg.dim
        )));
    }
    if params.n_users_src != ds.source.num_users()
        || params.n_items_src != ds.source.num_items()
        || params.n_users_tgt != ds.target.num_users()
        || params.n_items_tgt != ds.target.num_items()
    {
        return Err(Error::usage(
            "checkpoint node counts do not match the configured dataset",
        ));
    }
    Ok(())
}

/// Full-sort evaluation of a checkpoint.
pub fn cmd_eval(ctx: &Ctx, checkpoint: Option<PathBuf>, k: Option<usize>) -> Result<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| ctx.out_dir.join("checkpoint.bin"));
    let (params, meta) = load_checkpoint(&ckpt_path)?;
    let ds = ctx.load_dataset()?;
    check_checkpoint_matches(&params, &ds, &ctx.cfg.train)?;
    let opts = EvalOptions {
        k: k.unwrap_or(ctx.cfg.eval.k),
        head_tail_mode: ctx.cfg.eval.head_tail_mode,
        forward: ctx.cfg.train.forward_settings(),
    };
    let report = evaluate(&params, &ds, &opts)?;
    let doc = json!({
        "config": ctx.cfg.echo(),
        "seed": ctx.seed,
        "checkpoint": ckpt_path,
        "checkpoint_seed": meta.seed,
        "checkpoint_step": meta.step,
        "report": report,
    });
    let path = ctx.write_json("eval_report.json", &doc)?;
    println!(
        "eval: target HR@{} {:.4}, NDCG@{} {:.4} (head {:.4} / tail {:.4}); wrote {}",
        opts.k,
        report.target.overall.hr_at_k,
        opts.k,
        report.target.overall.ndcg_at_k,
        report.target.head.ndcg_at_k,
        report.target.tail.ndcg_at_k,
        path.display()
    );
    Ok(())
}

fn write_curve(path: &Path, provenance: &serde_json::Value, curve: &hcts_core::data::LongTailCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?,
    );
    let fail = |e: std::io::Error| Error::data(format!("report write failed: {e}"));
    writeln!(out, "# provenance: {provenance}").map_err(fail)?;
    writeln!(out, "rank\tnormalized_degree").map_err(fail)?;
    for (rank, v) in curve.normalized.iter().enumerate() {
        writeln!(out, "{}\t{:.12e}", rank + 1, v).map_err(fail)?;
    }
    out.flush().map_err(fail)
}

/// Normalized-degree long-tail curves for each domain and the merged graph.
pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let (src, tgt) = ctx.load_graphs()?;
    let curves = long_tail_report(&[("source", &src), ("target", &tgt)])?;
    let provenance = ctx.provenance();
    for curve in &curves {
        let path = ctx.out_dir.join(format!("longtail_{}.tsv", curve.label));
        write_curve(&path, &provenance, curve)?;
        println!(
            "report: {} users={} top_decile_mass={:.6}",
            path.display(),
            curve.normalized.len(),
            hcts_core::data::top_decile_mass(curve)
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportMode {
    Lorentz,
    Poincare,
    Tangent,
}

/// Dump embedding coordinates for external plotting.
pub fn cmd_export(ctx: &Ctx, checkpoint: Option<PathBuf>, mode: ExportMode) -> Result<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| ctx.out_dir.join("checkpoint.bin"));
    let (params, _) = load_checkpoint(&ckpt_path)?;
    let ds = ctx.load_dataset()?;
    check_checkpoint_matches(&params, &ds, &ctx.cfg.train)?;
    if ctx.cfg.train.euclidean && mode != ExportMode::Tangent {
        return Err(Error::usage(
            "a euclidean-ablation checkpoint only supports tangent export",
        ));
    }
    let state = forward_all(&params, &ds, &ctx.cfg.train.forward_settings())?;

    let name = match mode {
        ExportMode::Lorentz => "embeddings_lorentz.tsv",
        ExportMode::Poincare => "embeddings_poincare.tsv",
        ExportMode::Tangent => "embeddings_tangent.tsv",
    };
    let path = ctx.out_dir.join(name);
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?,
    );
    let fail = |e: std::io::Error| Error::data(format!("export write failed: {e}"));
    writeln!(out, "# provenance: {}", ctx.provenance()).map_err(fail)?;
    writeln!(out, "kind\tdomain\texternal_id\tcoordinates...").map_err(fail)?;

    let mut emit = |kind: &str,
                    domain: &str,
                    ids: &[String],
                    table: &hcts_core::propagation::EmbeddingTable,
                    k: f64|
     -> Result<()> {
        for r in 0..table.rows {
            let row = table.row(r);
            let coords: Vec<f64> = match mode {
                ExportMode::Lorentz => row.to_vec(),
                ExportMode::Poincare => {
                    let p = geometry::LorentzPoint::new(row.to_vec(), k)
                        .map_err(|e| Error::numeric(format!("off-manifold row in export: {e}")))?;
                    geometry::to_poincare(&p)
                }
                ExportMode::Tangent => {
                    if ctx.cfg.train.euclidean {
                        row[1..].to_vec()
                    } else {
                        let p = geometry::LorentzPoint::new(row.to_vec(), k).map_err(|e| {
                            Error::numeric(format!("off-manifold row in export: {e}"))
                        })?;
                        geometry::log_map_o(&p).spatial().to_vec()
                    }
                }
            };
            let rendered: Vec<String> = coords.iter().map(|c| format!("{c:.12e}")).collect();
            writeln!(out, "{kind}\t{domain}\t{}\t{}", ids[r], rendered.join("\t"))
                .map_err(|e| Error::data(format!("export write failed: {e}")))?;
        }
        Ok(())
    };
    emit("user", "source", ds.source.external_user_ids(), &state.source.lifted_users, state.source.k)?;
    emit("item", "source", ds.source.external_item_ids(), &state.source.lifted_items, state.source.k)?;
    emit("user", "target", ds.target.external_user_ids(), &state.target.lifted_users, state.target.k)?;
    emit("item", "target", ds.target.external_item_ids(), &state.target.lifted_items, state.target.k)?;
    out.flush().map_err(fail)?;
    println!("export: wrote {}", path.display());
    Ok(())
}
