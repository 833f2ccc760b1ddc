use std::io::Write;
use std::path::Path;

use motionrag_core::artifact::{write_atomic, write_bytes_atomic};
use motionrag_core::contrastive::{read_model, retrieval_accuracy, train, write_model};
use motionrag_core::diffusion::{
    history_csv, prepare_corpus, read_diffusion, refine as refine_motion, train_diffusion as fit_diffusion,
    write_diffusion, RefineInputs,
};
use motionrag_core::graph::{
    build_graph_from_corpus, graph_stats, prune_with_report, read_graph, write_graph, JointThreshold,
};
use motionrag_core::ingest::{
    load_corpus, read_beats, read_features, read_motion, save_corpus, synthesize_corpus_with, window_records,
    write_beats, write_features, write_motion, MotionStreamWriter, SynthOptions,
};
use motionrag_core::kinematics::{forward_kinematics, Frame};
use motionrag_core::metrics::{
    bas_with, diversity, feature_rows, frechet_distance, motion_beats, seam_stats, FeatureSummary,
};
use motionrag_core::synthesis::{generate_into, GenerationSink, Strategy, TraceRecord, Transition};
use motionrag_core::{Error, Result};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::{
    BuildGraphArgs, EvaluateArgs, GenerateArgs, PruneArgs, RefineArgs, StatsArgs, SynthArgs, TrainContrastiveArgs,
    TrainDiffusionArgs,
};

/// Seed offset of the query music track relative to the corpus seed.
const QUERY_SEED_OFFSET: u64 = 1_000_003;

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, v).map_err(|e| Error::Format {
            record: path.display().to_string(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn read_music(path: &Path) -> Result<Array2<f64>> {
    Ok(read_features(path)?.mapv(f64::from))
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

pub fn synth_corpus(a: &SynthArgs, cfg: PipelineConfig) -> Result<Value> {
    let s = &cfg.synth;
    let opts = SynthOptions {
        clip_seconds: s.clip_seconds,
        ..SynthOptions::default()
    };
    let corpus = synthesize_corpus_with(s.seed, a.clips.unwrap_or(s.clips), &opts)?;
    save_corpus(&corpus, &a.out)?;
    // A longer music track to generate for, drawn like the corpus clips.
    let query_opts = SynthOptions {
        clip_seconds: cfg.generate.frames as f64 / opts.fps,
        offset_every: 0,
        ..opts
    };
    let query = synthesize_corpus_with(s.seed.wrapping_add(QUERY_SEED_OFFSET), 1, &query_opts)?;
    let id = query.clips[0].id().to_string();
    let music = a.out.join("query").join("music.f32");
    let beats = a.out.join("query").join("music.beats");
    write_features(&music, &query.music_feats[&id])?;
    write_beats(&beats, &query.beats[&id])?;
    Ok(json!({
        "corpus": a.out.display().to_string(),
        "clips": corpus.clips.len(),
        "digest": corpus.digest(),
        "query_music": music.display().to_string(),
        "query_beats": beats.display().to_string(),
    }))
}

pub fn build_graph(a: &BuildGraphArgs, mut cfg: PipelineConfig) -> Result<Value> {
    if let Some(n) = a.n_mean_frames {
        cfg.graph.n_mean_frames = n;
    }
    if let Some(t) = a.min_joints {
        cfg.graph.joint_threshold = JointThreshold::Count(t);
    }
    if a.root_relative {
        cfg.graph.use_world_positions = false;
    }
    let corpus = load_corpus(&a.corpus)?;
    let g = build_graph_from_corpus(&corpus, &cfg.graph)?;
    write_graph(&a.out, &g)?;
    Ok(to_value(&graph_stats(&g)))
}

pub fn prune(a: &PruneArgs) -> Result<Value> {
    let g = read_graph(&a.graph)?;
    let (p, report) = prune_with_report(&g)?;
    write_graph(&a.out, &p)?;
    let v = json!({ "report": report, "stats": graph_stats(&p) });
    if let Some(path) = &a.report {
        write_json(path, &v)?;
    }
    Ok(v)
}

pub fn train_contrastive(a: &TrainContrastiveArgs, mut cfg: PipelineConfig) -> Result<Value> {
    if let Some(e) = a.epochs {
        cfg.contrastive.epochs = e;
    }
    let corpus = load_corpus(&a.corpus)?;
    let out = train(&corpus, &cfg.contrastive)?;
    write_model(&a.out, &out.model)?;
    if let Some(path) = &a.history {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in out.loss_history.iter().enumerate() {
            csv.push_str(&format!("{i},{l:.9e}\n"));
        }
        write_bytes_atomic(path, csv.as_bytes())?;
    }
    let (music, motion) = corpus.paired_features();
    Ok(json!({
        "pairs": music.nrows(),
        "initial_loss": out.loss_history.first(),
        "final_loss": out.loss_history.last(),
        "top1": retrieval_accuracy(&out.model, &music, &motion)?,
        "tau": out.model.tau(),
    }))
}

struct StreamSink<W: Write> {
    writer: MotionStreamWriter<W>,
    nodes: Vec<usize>,
    transitions: Vec<Transition>,
}

impl<W: Write> GenerationSink for StreamSink<W> {
    fn frame(&mut self, frame: &Frame) -> Result<()> {
        self.writer.push(frame)
    }

    fn node(&mut self, node: usize) -> Result<()> {
        self.nodes.push(node);
        Ok(())
    }

    fn transition(&mut self, t: &Transition) -> Result<()> {
        self.transitions.push(t.clone());
        Ok(())
    }
}

pub fn generate(a: &GenerateArgs, mut cfg: PipelineConfig) -> Result<Value> {
    if let Some(f) = a.frames {
        cfg.generate.frames = f as usize;
    }
    if let Some(w) = a.blend {
        cfg.synthesis.blend_frames = w;
    }
    if let Some(width) = a.beam {
        cfg.synthesis.strategy = Strategy::Beam { width };
    }
    let frames = cfg.generate.frames;
    if frames == 0 {
        return Err(Error::Config("frames must be at least 1".into()));
    }
    let g = read_graph(&a.graph)?;
    let model = read_model(&a.model)?;
    let music = read_music(&a.music)?;
    let mut trace = None;
    write_atomic(&a.out, |w| {
        let mut sink = StreamSink {
            writer: MotionStreamWriter::new(w, "motion_mg", g.fps())?,
            nodes: Vec::new(),
            transitions: Vec::new(),
        };
        generate_into(&g, &music.view(), &model, frames, &cfg.synthesis, &mut sink)?;
        let written = sink.writer.frames();
        sink.writer.finish()?;
        trace = Some((written, sink.nodes, sink.transitions));
        Ok(())
    })?;
    let (written, nodes, transitions) = trace.expect("generation completed");
    let record = TraceRecord {
        frames: written,
        blend_frames: cfg.synthesis.blend_frames,
        node_ids: nodes.iter().map(|&n| g.node(n).clip.id().to_string()).collect(),
        nodes,
        transitions,
    };
    if let Some(path) = &a.trace {
        write_json(path, &record)?;
    }
    Ok(json!({
        "frames": record.frames,
        "nodes": record.nodes.len(),
        "seams": seam_stats(&record.transitions),
    }))
}

pub fn train_diffusion(a: &TrainDiffusionArgs, mut cfg: PipelineConfig, quiet: bool) -> Result<Value> {
    if let Some(e) = a.epochs {
        cfg.diffusion.epochs = e;
    }
    let corpus = load_corpus(&a.corpus)?;
    let contrastive = read_model(&a.contrastive)?;
    let prepared = prepare_corpus(&corpus, &contrastive, &cfg.diffusion)?;
    let total = cfg.diffusion.epochs;
    let out = fit_diffusion(
        &prepared.examples,
        prepared.dims,
        prepared.normalizer,
        &corpus.skeleton,
        &cfg.diffusion,
        |e| {
            if !quiet && ((e.epoch + 1) % 10 == 0 || e.epoch + 1 == total) {
                eprintln!("epoch {}/{total}: loss {:.5}", e.epoch + 1, e.losses.total);
            }
        },
    )?;
    write_diffusion(&a.out, &out.model)?;
    if let Some(path) = &a.history {
        write_bytes_atomic(path, history_csv(&out.history).as_bytes())?;
    }
    Ok(json!({
        "windows": prepared.examples.len(),
        "epochs": out.history.len(),
        "initial_loss": out.history.first().map(|e| e.losses),
        "final_loss": out.history.last().map(|e| e.losses),
    }))
}

pub fn refine(a: &RefineArgs, mut cfg: PipelineConfig) -> Result<Value> {
    if let Some(k) = a.top_k {
        cfg.refine.top_k = k;
    }
    let model = read_diffusion(&a.diffusion)?;
    let motion = read_motion(&a.motion)?;
    let music = read_music(&a.music)?;
    let beats = read_beats(&a.beats)?;
    let graph = read_graph(&a.graph)?;
    let contrastive = read_model(&a.contrastive)?;
    let inputs = RefineInputs {
        motion: &motion,
        music: &music,
        beats: &beats,
        graph: &graph,
        contrastive: &contrastive,
    };
    let out = refine_motion(&model, &inputs, &cfg.refine)?.with_id("motion_diff");
    write_motion(&a.out, &out)?;
    Ok(json!({ "frames": out.frames(), "id": out.id() }))
}

#[derive(Serialize)]
struct EvaluationReport {
    motions: usize,
    bas: f64,
    div_k: f64,
    div_g: f64,
    fid_k: f64,
    fid_g: f64,
    reference_div_k: f64,
    reference_div_g: f64,
    seam_stats: Option<motionrag_core::metrics::SeamStats>,
}

pub fn evaluate(a: &EvaluateArgs, cfg: PipelineConfig) -> Result<Value> {
    cfg.metrics.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let skeleton = &corpus.skeleton;
    let music_beats = read_beats(&a.beats)?;
    let mut generated = Vec::new();
    let mut bas = 0.0;
    for path in &a.motion {
        let clip = read_motion(path)?;
        if clip.fps() != corpus.fps {
            return Err(Error::Shape(format!("{}: fps {} differs from the corpus", path.display(), clip.fps())));
        }
        let seq = forward_kinematics(skeleton, &clip)?;
        let duration = clip.frames() as f64 / clip.fps();
        // Only music beats the motion actually covers can be matched.
        let covered: Vec<f64> = music_beats.iter().copied().filter(|&t| t <= duration).collect();
        bas += bas_with(&covered, &motion_beats(&seq, clip.fps())?, &cfg.metrics)?;
        generated.push(seq);
    }
    bas /= a.motion.len() as f64;
    let reference = window_records(&corpus, &corpus.windowing)?
        .iter()
        .map(|r| forward_kinematics(skeleton, &r.clip))
        .collect::<Result<Vec<_>>>()?;
    let (gk, gg) = feature_rows(&generated, corpus.fps, skeleton, &cfg.metrics)?;
    let (rk, rg) = feature_rows(&reference, corpus.fps, skeleton, &cfg.metrics)?;
    let fid = |r: &Array2<f64>, g: &Array2<f64>| -> Result<f64> {
        frechet_distance(&FeatureSummary::from_samples(&r.view())?, &FeatureSummary::from_samples(&g.view())?)
    };
    let seams = if a.trace.is_empty() {
        None
    } else {
        let mut all = Vec::new();
        for path in &a.trace {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let t: TraceRecord = serde_json::from_str(&text).map_err(|e| Error::Format {
                record: path.display().to_string(),
                message: e.to_string(),
            })?;
            all.extend(t.transitions);
        }
        Some(seam_stats(&all))
    };
    let report = EvaluationReport {
        motions: a.motion.len(),
        bas,
        div_k: diversity(&gk.view())?,
        div_g: diversity(&gg.view())?,
        fid_k: fid(&rk, &gk)?,
        fid_g: fid(&rg, &gg)?,
        reference_div_k: diversity(&rk.view())?,
        reference_div_g: diversity(&rg.view())?,
        seam_stats: seams,
    };
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(to_value(&report))
}

pub fn stats(a: &StatsArgs) -> Result<Value> {
    if a.graph.is_none() && a.corpus.is_none() {
        return Err(Error::Config("stats needs --graph or --corpus".into()));
    }
    let mut v = serde_json::Map::new();
    if let Some(path) = &a.graph {
        v.insert("graph".into(), to_value(&graph_stats(&read_graph(path)?)));
    }
    if let Some(path) = &a.corpus {
        let c = load_corpus(path)?;
        v.insert(
            "corpus".into(),
            json!({
                "clips": c.clips.len(),
                "windows": window_records(&c, &c.windowing)?.len(),
                "joints": c.skeleton.joint_count(),
                "fps": c.fps,
                "digest": c.digest(),
            }),
        );
    }
    Ok(Value::Object(v))
}
