use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use stitchguard::audio::{read_path_manifest, read_wav, write_wav};
use stitchguard::augment::{
    apply_compression, apply_distortion, build_plan, AugmentPlan, Codec, CompressionSpec, Disturbance,
    DistortionKind, DistortionSpec,
};
use stitchguard::config::KeyValues;
use stitchguard::features::{write_feature_file, Extractor, FeatureConfig, FeatureKind};
use stitchguard::metrics::{compute_eer, final_score as weighted, read_scores, write_scores, ScoreRecord};
use stitchguard::model::{Model, StitchMode};
use stitchguard::pipeline::{
    chunk_to_kv, feature_config_from_kv, feature_config_to_kv, finetune as run_finetune, load_utterances,
    read_manifest, score_all, train as run_train, write_manifest, Aggregation, ChunkSpec, ManifestEntry,
    RunConfig, TrainReport,
};

use crate::{AugmentArgs, CliError, CliResult, EerArgs, ExtractArgs, FinalScoreArgs, FinetuneArgs, InferArgs, TrainArgs};

fn parse_flag<V: std::str::FromStr>(flag: &str, value: &str) -> CliResult<V>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    let kind: FeatureKind = parse_flag("feature", &a.feature)?;
    let cfg = match kind {
        FeatureKind::Lfcc => FeatureConfig::lfcc(a.dim.unwrap_or(20), a.nfft),
        FeatureKind::Llfb => FeatureConfig::llfb(a.dim.unwrap_or(20), a.nfft),
        FeatureKind::DctDftSpec => {
            let mut c = FeatureConfig::dct_dft(a.nfft);
            if let Some(d) = a.dim {
                c.dim = d;
            }
            c
        }
    };
    let extractor = Extractor::new(&cfg)?;
    let entries = read_manifest(&a.manifest)?;
    fs::create_dir_all(&a.out)?;
    entries.par_iter().try_for_each(|e| -> CliResult<()> {
        let fm = extractor.extract(&read_wav(&e.path)?)?;
        write_feature_file(&fm, &a.out.join(format!("{}.feat", e.utt_id)))?;
        Ok(())
    })?;
    fs::write(a.out.join("features.conf"), feature_config_to_kv(&cfg).to_text())?;
    println!("extracted {} utterances", entries.len());
    Ok(())
}

/// Paper budgets are 60k distortions and 40k compressions out of 5 × 55k
/// candidates; defaults keep those fractions of the local candidate pool.
fn default_budget(candidates: usize, share: f64) -> usize {
    ((candidates as f64) * share / 275.0).round() as usize
}

fn codec_specs(template: Option<&str>) -> Vec<CompressionSpec> {
    match template {
        Some(t) => {
            let argv: Vec<String> = t.split_whitespace().map(str::to_string).collect();
            let mut specs: Vec<CompressionSpec> = [Codec::Mp3, Codec::Ogg, Codec::Aac, Codec::Opus]
                .into_iter()
                .map(|c| CompressionSpec::external(c, argv.clone(), None))
                .collect();
            specs.push(CompressionSpec::builtin(Codec::Telephony));
            specs
        }
        None => vec![
            CompressionSpec::builtin(Codec::Telephony),
            CompressionSpec::builtin(Codec::Surrogate),
        ],
    }
}

pub fn augment(a: &AugmentArgs) -> CliResult<()> {
    let entries = read_manifest(&a.manifest)?;
    let compressions = codec_specs(a.codec_cmd.as_deref());
    let plan = if a.plan.exists() {
        AugmentPlan::load(&a.plan)?
    } else {
        let mut distortions = vec![DistortionSpec::new(DistortionKind::Volume, Vec::new())];
        if let Some(m) = &a.noise_manifest {
            let sources = read_path_manifest(m)?;
            for kind in [DistortionKind::Noise, DistortionKind::Music, DistortionKind::Babble] {
                distortions.push(DistortionSpec::new(kind, sources.clone()));
            }
        }
        if let Some(m) = &a.rir_manifest {
            distortions.push(DistortionSpec::new(DistortionKind::Reverb, read_path_manifest(m)?));
        }
        let candidates = a.expansion * entries.len();
        let ids: Vec<String> = entries.iter().map(|e| e.utt_id.clone()).collect();
        let plan = build_plan(
            &ids,
            &distortions,
            &compressions,
            a.expansion,
            a.distortion_budget.unwrap_or_else(|| default_budget(candidates, 60.0)),
            a.compression_budget.unwrap_or_else(|| default_budget(candidates, 40.0)),
            a.seed,
        )?;
        plan.save(&a.plan)?;
        plan
    };

    let by_id: HashMap<&str, &ManifestEntry> = entries.iter().map(|e| (e.utt_id.as_str(), e)).collect();
    fs::create_dir_all(&a.out)?;
    let work = a.out.join(".work");
    let outputs: Vec<ManifestEntry> = plan
        .entries
        .par_iter()
        .map(|p| -> CliResult<ManifestEntry> {
            let src = by_id
                .get(p.src_id.as_str())
                .ok_or_else(|| CliError::Data(format!("plan references unknown utterance {:?}", p.src_id)))?;
            let clip = read_wav(&src.path)?;
            let out = match &p.disturbance {
                Disturbance::Compression { codec, bitrate_kbps } => {
                    let spec = compressions
                        .iter()
                        .find(|s| s.codec == *codec)
                        .ok_or_else(|| CliError::Data(format!("plan needs codec {codec}, which is not configured")))?;
                    apply_compression(&clip, spec, *bitrate_kbps, &work.join(&p.out_id))?
                }
                d => {
                    let seed = match d {
                        Disturbance::Noise { seed, .. } => *seed,
                        _ => 0,
                    };
                    apply_distortion(&clip, d, &mut ChaCha8Rng::seed_from_u64(seed))?
                }
            };
            let path = a.out.join(format!("{}.wav", p.out_id));
            write_wav(&out, &path)?;
            Ok(ManifestEntry {
                utt_id: p.out_id.clone(),
                path,
                label: src.label,
            })
        })
        .collect::<CliResult<_>>()?;
    if work.exists() {
        fs::remove_dir_all(&work)?;
    }
    write_manifest(&a.out.join("manifest.tsv"), &outputs)?;
    println!("wrote {} augmented utterances", outputs.len());
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn emit_log(report: &TrainReport, log: Option<&Path>) -> CliResult<()> {
    let text: String = report.log.iter().map(|l| format!("{l}\n")).collect();
    print!("{text}");
    println!("best epoch {}", report.best_epoch);
    if let Some(p) = log {
        fs::File::create(p)?.write_all(text.as_bytes())?;
    }
    Ok(())
}

fn checkpoint_metadata(features: &FeatureConfig, chunk: &ChunkSpec, report: &TrainReport, seed: u64) -> KeyValues {
    let mut meta = feature_config_to_kv(features);
    meta.merge(chunk_to_kv(chunk));
    meta.set("meta.best_epoch", report.best_epoch);
    meta.set("meta.seed", seed);
    meta
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut run = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    let entries = read_manifest(&a.manifest)?;
    let utts = load_utterances(&entries, &run.features, a.features.as_deref())?;
    let model = Model::<f32>::build(run.model.clone(), run.train.seed)?;
    let (model, report) = run_train(&utts, run.features.hop_ms, &run.train, model)?;
    emit_log(&report, a.log.as_deref())?;
    model.save(&a.out, checkpoint_metadata(&run.features, &run.train.chunk, &report, run.train.seed))?;
    Ok(())
}

fn checkpoint_features(meta: &KeyValues) -> CliResult<FeatureConfig> {
    let mut kv = meta.clone();
    let mut features = kv.split_namespace("features");
    Ok(feature_config_from_kv(&mut features, &FeatureConfig::lfcc(20, 512))?)
}

fn checkpoint_chunk(meta: &KeyValues) -> CliResult<ChunkSpec> {
    let mut kv = meta.clone();
    let mut c = ChunkSpec::default();
    kv.take_into("chunk.ms", &mut c.chunk_ms)?;
    kv.take_into("chunk.overlap", &mut c.overlap_ratio)?;
    kv.take_into("chunk.pad", &mut c.pad_policy)?;
    Ok(c)
}

pub fn finetune(a: &FinetuneArgs) -> CliResult<()> {
    let mut run = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    let (model, meta) = Model::<f32>::load(&a.model)?;
    let features = checkpoint_features(&meta)?;
    let entries = read_manifest(&a.manifest)?;
    let utts = load_utterances(&entries, &features, a.features.as_deref())?;
    let (model, report) = run_finetune(&utts, features.hop_ms, &run.train, model)?;
    emit_log(&report, a.log.as_deref())?;
    let tuned = run.train.for_finetune();
    model.save(&a.out, checkpoint_metadata(&features, &tuned.chunk, &report, run.train.seed))?;
    Ok(())
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let mode: StitchMode = parse_flag("mode", &a.mode)?;
    let how: Aggregation = match &a.aggregation {
        Some(s) => parse_flag("aggregation", s)?,
        None => Aggregation::Mean,
    };
    let (model, meta) = Model::<f32>::load(&a.model)?;
    let features = checkpoint_features(&meta)?;
    let mut chunk = checkpoint_chunk(&meta)?;
    if let Some(ms) = a.chunk_ms {
        chunk.chunk_ms = ms;
    }
    if let Some(r) = a.overlap {
        chunk.overlap_ratio = r;
    }
    chunk.frames(features.hop_ms)?;
    let entries = read_manifest(&a.manifest)?;
    let utts = load_utterances(&entries, &features, None)?;
    let scores: Vec<ScoreRecord> = score_all(&model, &utts, features.hop_ms, &chunk, mode, how)?
        .into_iter()
        .map(|r| ScoreRecord { label: None, ..r })
        .collect();
    write_scores(&a.out, &scores)?;
    println!("scored {} utterances", scores.len());
    Ok(())
}

pub fn eer(a: &EerArgs) -> CliResult<()> {
    let mut records = read_scores(&a.scores)?;
    if let Some(m) = &a.labels {
        let labels: HashMap<String, _> = read_manifest(m)?.into_iter().map(|e| (e.utt_id, e.label)).collect();
        for r in &mut records {
            let l = labels
                .get(&r.utt_id)
                .ok_or_else(|| CliError::Data(format!("no label for utterance {:?}", r.utt_id)))?;
            r.label = Some(*l);
        }
    }
    if let Some(r) = records.iter().find(|r| r.label.is_none()) {
        return Err(CliError::Data(format!("utterance {:?} has no label; pass --labels", r.utt_id)));
    }
    let result = compute_eer(&records)?;
    println!("EER {:.4}", result.eer);
    Ok(())
}

pub fn final_score(a: &FinalScoreArgs) -> CliResult<()> {
    println!("{:.4}", weighted(a.r1, a.r2)?);
    Ok(())
}
