//! Subcommand bodies. Each writes its report to `out` and registers the
//! files it reads and writes with the manifest recorder.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nqe::codec::{decode_image, encode_image, Bitstream, PatchEncoder};
use nqe::cost::{cost_report, render_bottleneck_table, render_processor_table, BitMode};
use nqe::data::{frames_to_patches, save_image, synthetic_textures, synthetic_tiles, Dataset};
use nqe::integer::{lower_with, tensor_pixels, IntegerModel, LowerOptions};
use nqe::metrics::{format_psnr, ms_ssim, psnr, psnr_record};
use nqe::model::{Nqe, Output};
use nqe::purenet::{mean_patch_baseline, Decoder};
use nqe::topology::{topology, BottleneckKind, DecoderVariant, ModelConfig, Precision, PurenetConfig};
use nqe::train::{accuracy, train_classifier, CodecConfig, CodecTrainer, JsonLines, TrainConfig};
use nqe::weights::{export_weights, import_weights, lowered_from_bytes, lowered_to_bytes, ExportOptions, Imported};
use nqe::Tensor;
use serde_json::json;

use crate::config::{load_frame, patches_of, RunConfig, Task};
use crate::error::{CliError, CliResult};
use crate::manifest::{beside, Recorder};
use crate::{
    CompressArgs, CostArgs, DecompressArgs, EvalArgs, ExportArgs, ImportArgs, InferArgs, LowerArgs, OutputKind,
    TablesArgs, TrainArgs,
};

fn say(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::output(Path::new("<stdout>"), e))
}

fn line(out: &mut dyn Write, value: &serde_json::Value) -> CliResult<()> {
    say(out, &format!("{value}\n"))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::output(path, e))
}

fn args_json(args: &impl serde::Serialize) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn load_weights(path: &Path, rec: &mut Recorder) -> CliResult<Imported> {
    rec.input(path);
    import_weights(path).map_err(|e| match e {
        nqe::Error::Io(io) => CliError::input(path, io),
        other => other.into(),
    })
}

/// Core errors raised while writing `path` are runtime faults.
fn writing(path: &Path) -> impl Fn(nqe::Error) -> CliError + '_ {
    move |e| match e {
        nqe::Error::Io(io) => CliError::output(path, io),
        other => other.into(),
    }
}

fn parse<T: std::str::FromStr<Err = nqe::Error>>(s: &str) -> CliResult<T> {
    Ok(s.parse()?)
}

/// Decoder from a weights file, switched to `variant`.
fn decoder_of(imported: &Imported, variant: &str) -> CliResult<Decoder> {
    let variant: DecoderVariant = parse(variant)?;
    let decoder = imported
        .decoder
        .clone()
        .ok_or_else(|| CliError::Validation("weights file carries no decoder".into()))?;
    Ok(decoder.with_variant(variant))
}

pub fn train(a: &TrainArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    rec.input(&a.config);
    let cfg = RunConfig::load(&a.config)?;
    for p in cfg.input_files() {
        rec.input(&p);
    }
    // Configuration values win over flags, flags over defaults.
    let seed = cfg.seed.or(a.seed).unwrap_or(0);
    let task = cfg.task.or(a.task).unwrap_or(Task::Classify);
    rec.seed = Some(seed);
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::output(&a.out, e))?;
    rec.default_path = Some(a.out.join("manifest.json"));

    let log_path = a.out.join("log.jsonl");
    let file = File::create(&log_path).map_err(|e| CliError::output(&log_path, e))?;
    let mut log = JsonLines(BufWriter::new(file));
    let weights_path = a.out.join("weights.nqew");

    let summary = match task {
        Task::Classify => {
            let train_cfg = cfg.train.clone().unwrap_or(TrainConfig {
                seed,
                ..TrainConfig::toy()
            });
            rec.config = json!({ "task": task, "seed": seed, "model": cfg.model, "train": train_cfg, "data": cfg.data });
            let (train, test) = cfg.classification_data(seed)?;
            let mut model = Nqe::new(cfg.model.clone(), seed)?;
            let outcome = train_classifier(&mut model, &train, &train_cfg, &mut log)?;
            let test_accuracy = accuracy(&model, &test)?;
            export_weights(
                &model,
                &weights_path,
                ExportOptions {
                    proxies: true,
                    decoder: None,
                },
            )
            .map_err(writing(&weights_path))?;
            json!({
                "task": "classify",
                "stage1_accuracy": outcome.stage1_accuracy,
                "folded_accuracy": outcome.folded_accuracy,
                "stage2_accuracy": outcome.stage2_accuracy,
                "test_accuracy": test_accuracy,
                "quantizers": outcome.quantizer_history.last(),
            })
        }
        Task::Codec => {
            let codec_cfg = cfg.codec.clone().unwrap_or(CodecConfig {
                seed,
                ..CodecConfig::toy()
            });
            let dec_cfg = cfg.model.decoder.clone().unwrap_or_else(PurenetConfig::toy);
            if dec_cfg.patch_size != cfg.model.input_size {
                return Err(CliError::Validation(format!(
                    "decoder patch {} differs from the encoder input {}",
                    dec_cfg.patch_size, cfg.model.input_size
                )));
            }
            rec.config = json!({ "task": task, "seed": seed, "model": cfg.model, "decoder": dec_cfg, "codec": codec_cfg, "data": cfg.data });
            let (train, test) = cfg.codec_frames(seed)?;
            let patches = patches_of(&train, dec_cfg.patch_size)?;

            let mut encoder = Nqe::new(cfg.model.clone(), seed)?;
            // Stage A needs a patch-independent decoder.
            let stage_a_variant = match dec_cfg.variant {
                DecoderVariant::Purenet => DecoderVariant::PatchIndependent,
                v => v,
            };
            let mut decoder = Decoder::new(
                PurenetConfig {
                    variant: stage_a_variant,
                    ..dec_cfg.clone()
                },
                cfg.model.code_bits(),
                seed,
            )?;
            let mut trainer = CodecTrainer::new(codec_cfg)?;
            let a_report = trainer.stage_a(&mut encoder, &mut decoder, &patches, &mut log)?;
            let pi_psnr = held_out_psnr(&encoder, &decoder, &test)?;
            let b_report = trainer.stage_b(&encoder, &mut decoder, &train, &mut log)?;
            let c_report = trainer.stage_c(&encoder, &mut decoder, &train, &mut log)?;
            let purenet_psnr = held_out_psnr(&encoder, &decoder, &test)?;
            let baseline = psnr(&mean_patch_baseline(&test, dec_cfg.patch_size)?, &test)?;
            export_weights(
                &encoder,
                &weights_path,
                ExportOptions {
                    proxies: true,
                    decoder: Some(&decoder),
                },
            )
            .map_err(writing(&weights_path))?;
            json!({
                "task": "codec",
                "stage_a_loss": a_report.losses,
                "stage_b_loss": b_report.losses,
                "stage_c_loss": c_report.losses,
                "held_out_psnr": {
                    stage_a_variant_name(stage_a_variant): psnr_record(pi_psnr),
                    "purenet": psnr_record(purenet_psnr),
                    "mean_patch": psnr_record(baseline),
                },
            })
        }
    };
    log.0.flush().map_err(|e| CliError::output(&log_path, e))?;
    drop(log);

    let summary_path = a.out.join("summary.json");
    write_file(&summary_path, (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes())?;
    for p in [&weights_path, &log_path, &summary_path] {
        rec.output(p);
    }
    line(out, &summary)
}

fn stage_a_variant_name(v: DecoderVariant) -> &'static str {
    match v {
        DecoderVariant::BlockBased => "bbd",
        _ => "pi",
    }
}

/// PSNR of decoded held-out frames.
fn held_out_psnr(encoder: &Nqe, decoder: &Decoder, frames: &Tensor) -> CliResult<f64> {
    let (patches, rows, cols) = frames_to_patches(frames, decoder.patch_size())?;
    let codes = encoder.encode(&patches)?;
    let decoded = decoder.decode(&codes, rows, cols)?;
    Ok(psnr(&decoded, frames)?)
}

pub fn eval(a: &EvalArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let imported = load_weights(&a.weights, rec)?;
    let model = &imported.model;
    let run = match &a.config {
        Some(path) => {
            rec.input(path);
            let cfg = RunConfig::load(path)?;
            if cfg.model != *model.config() {
                return Err(CliError::Validation("configuration describes a different model".into()));
            }
            for p in cfg.input_files() {
                rec.input(&p);
            }
            Some(cfg)
        }
        None => None,
    };
    let seed = run.as_ref().and_then(|c| c.seed).or(a.seed).unwrap_or(0);
    rec.seed = Some(seed);
    rec.config = json!({ "args": args_json(a), "model": model.config() });
    let m = model.config();

    let report = match &imported.decoder {
        None => {
            // Held-out split of the training configuration.
            let test = match &run {
                Some(cfg) => cfg.classification_data(seed)?.1,
                None => synthetic_textures(256, m.input_size, m.classes, seed + 1)?,
            };
            let acc = if a.integer {
                integer_accuracy(model, &test)?
            } else {
                accuracy(model, &test)?
            };
            json!({ "task": "classify", "samples": test.len(), "integer": a.integer, "accuracy": acc })
        }
        Some(decoder) => {
            let frames = match &run {
                Some(cfg) => cfg.codec_frames(seed)?.1,
                None => synthetic_tiles(16, 2 * m.input_size, 2 * m.input_size, seed + 1),
            };
            let p = decoder.patch_size();
            let mut psnrs = serde_json::Map::new();
            for (name, v) in [
                ("purenet", DecoderVariant::Purenet),
                ("pi", DecoderVariant::PatchIndependent),
            ] {
                let d = decoder.clone().with_variant(v);
                psnrs.insert(name.into(), psnr_record(held_out_psnr(model, &d, &frames)?).into());
            }
            let baseline = psnr(&mean_patch_baseline(&frames, p)?, &frames)?;
            psnrs.insert("mean_patch".into(), psnr_record(baseline).into());
            json!({ "task": "codec", "frames": frames.batch(), "psnr": psnrs })
        }
    };
    line(out, &report)
}

fn integer_accuracy(model: &Nqe, data: &Dataset) -> CliResult<f64> {
    let im = lower_with(model, LowerOptions::default())?;
    let pixels = tensor_pixels(&data.images)?;
    let predicted = im.classify(&pixels, data.len())?;
    let correct = predicted.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

pub fn lower(a: &LowerArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let imported = load_weights(&a.weights, rec)?;
    let options = LowerOptions { absorb_bsn: !a.no_absorb };
    rec.config = json!({ "args": args_json(a), "model": imported.model.config() });
    let im = lower_with(&imported.model, options)?;
    write_file(&a.out, &lowered_to_bytes(&im)?)?;
    rec.output(&a.out);
    rec.default_path = Some(beside(&a.out));

    let widths = im.report_widths();
    if a.json {
        for w in &widths {
            line(out, &serde_json::to_value(w).map_err(nqe::Error::from)?)?;
        }
        for d in &im.bsn {
            line(out, &json!({ "record": "bsn", "layer": d.layer, "shift_exp": d.shift_exp, "elision": d.elision }))?;
        }
    } else {
        let mut text = format!("{:<24} {:<10} {:>12} {:>8}\n", "layer", "op", "accumulator", "storage");
        for w in &widths {
            let acc = w.accumulator_bits.map_or("-".to_string(), |b| b.to_string());
            text += &format!("{:<24} {:<10} {:>12} {:>8}\n", w.layer, w.op, acc, w.storage_bits);
        }
        for d in &im.bsn {
            text += &format!("bsn {:<20} shift 2^{:<4} {}\n", d.layer, d.shift_exp, d.elision);
        }
        say(out, &text)?;
    }
    Ok(())
}

pub fn infer(a: &InferArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    rec.input(&a.lowered);
    rec.input(&a.image);
    rec.config = json!({ "args": args_json(a) });
    let bytes = std::fs::read(&a.lowered).map_err(|e| CliError::input(&a.lowered, e))?;
    let im: IntegerModel = lowered_from_bytes(&bytes)?;
    let s = im.config.input_size;
    let x = load_frame(&a.image, s, false)?;
    if x.shape() != [1, s, s, 3] {
        return Err(CliError::Validation(format!(
            "{} is {:?}; the model takes {s}x{s} RGB",
            a.image.display(),
            &x.shape()[1..]
        )));
    }
    let pixels = tensor_pixels(&x)?;
    let output = match a.output {
        OutputKind::Code => Output::Code,
        OutputKind::Logits => Output::Logits,
    };
    if let Some(path) = &a.trace {
        let mut text = String::new();
        for r in im.trace(&pixels, 1, output)? {
            text += &serde_json::to_string(&r).map_err(nqe::Error::from)?;
            text.push('\n');
        }
        write_file(path, text.as_bytes())?;
        rec.output(path);
    }
    let values = im.forward(&pixels, 1, output)?;
    let record = match a.output {
        OutputKind::Code => {
            let bits: String = values.iter().map(|&b| if b != 0 { '1' } else { '0' }).collect();
            json!({ "output": "code", "bits": bits })
        }
        OutputKind::Logits => {
            let class = im.classify(&pixels, 1)?[0];
            json!({ "output": "logits", "values": values, "class": class })
        }
    };
    line(out, &record)
}

pub fn cost(a: &CostArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let config = ModelConfig {
        f: a.f,
        precision: parse::<Precision>(&a.precision)?,
        bottleneck: parse::<BottleneckKind>(&a.bottleneck)?,
        classes: a.classes,
        input_size: a.input_size,
        ..ModelConfig::full(a.f)
    };
    config.validate()?;
    let memory: BitMode = parse(&a.memory)?;
    let compute: BitMode = parse(&a.mode)?;
    rec.config = json!({ "args": args_json(a), "model": config });
    let report = cost_report(&config, memory, compute)?;
    if a.json {
        say(out, &report.render_json_lines()?)
    } else {
        say(out, &report.render_text())
    }
}

pub fn tables(a: &TablesArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    rec.config = json!({ "args": args_json(a) });
    let both = !a.appendix_a && !a.processor;
    let mut text = String::new();
    if a.processor || both {
        text += &render_processor_table(a.f)?;
    }
    if a.appendix_a || both {
        if !text.is_empty() {
            text.push('\n');
        }
        text += &render_bottleneck_table()?;
    }
    say(out, &text)
}

pub fn compress(a: &CompressArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let imported = load_weights(&a.weights, rec)?;
    rec.input(&a.image);
    rec.config = json!({ "args": args_json(a), "model": imported.model.config() });
    let model = &imported.model;
    let patch = model.config().input_size;
    let frame = load_frame(&a.image, patch, a.crop)?;
    let lowered;
    let encoder: &dyn PatchEncoder = if a.integer {
        lowered = lower_with(model, LowerOptions::default())?;
        &lowered
    } else {
        model
    };
    let bs = encode_image(&frame, encoder)?;
    write_file(&a.out, &bs.to_bytes()?)?;
    rec.output(&a.out);
    rec.default_path = Some(beside(&a.out));

    let mut record = json!({
        "height": bs.height,
        "width": bs.width,
        "patches": bs.patches(),
        "payload_bits": bs.payload.len(),
        "bpp": bs.bits_per_pixel(),
    });
    if let Some(path) = &a.recon {
        let decoder = decoder_of(&imported, &a.variant)?;
        let decoded = decode_image(&bs, &decoder)?;
        save_image(path, &decoded).map_err(writing(path))?;
        rec.output(path);
        let p = psnr(&decoded, &frame)?;
        record["psnr"] = psnr_record(p).into();
        log::info!("reconstruction PSNR {} dB", format_psnr(p));
    }
    line(out, &record)
}

pub fn decompress(a: &DecompressArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let imported = load_weights(&a.weights, rec)?;
    rec.input(&a.input);
    rec.config = json!({ "args": args_json(a) });
    let decoder = decoder_of(&imported, &a.variant)?;
    let bytes = std::fs::read(&a.input).map_err(|e| CliError::input(&a.input, e))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let decoded = decode_image(&bs, &decoder)?;
    save_image(&a.out, &decoded).map_err(writing(&a.out))?;
    rec.output(&a.out);
    rec.default_path = Some(beside(&a.out));

    let mut record = json!({ "height": bs.height, "width": bs.width, "variant": a.variant });
    if let Some(path) = &a.reference {
        rec.input(path);
        let reference = load_frame(path, bs.patch, false)?;
        let reference = if reference.shape() == decoded.shape() {
            reference
        } else {
            nqe::data::crop(&reference, 0, 0, bs.height, bs.width)?
        };
        record["psnr"] = psnr_record(psnr(&decoded, &reference)?).into();
        // Too small for five scales: leave the field out.
        if let Ok(v) = ms_ssim(&decoded, &reference) {
            record["ms_ssim"] = v.into();
        }
    }
    line(out, &record)
}

pub fn export(a: &ExportArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let (model, decoder) = match (&a.weights, &a.config) {
        (Some(path), _) => {
            let imported = load_weights(path, rec)?;
            if !imported.has_proxies && !a.no_proxies {
                log::warn!("{} has no proxy weights; exporting bin centres", path.display());
            }
            (imported.model, imported.decoder)
        }
        (None, Some(path)) => {
            rec.input(path);
            let cfg = RunConfig::load(path)?;
            let seed = cfg.seed.or(a.seed).unwrap_or(0);
            rec.seed = Some(seed);
            let mut model = Nqe::new(cfg.model.clone(), seed)?;
            if a.fold {
                model.fold_normalization()?;
            }
            let decoder = match &cfg.model.decoder {
                Some(d) => Some(Decoder::new(d.clone(), cfg.model.code_bits(), seed)?),
                None => None,
            };
            (model, decoder)
        }
        (None, None) => return Err(CliError::Validation("export needs --weights or --config".into())),
    };
    rec.config = json!({ "args": args_json(a), "model": model.config() });
    export_weights(
        &model,
        &a.out,
        ExportOptions {
            proxies: !a.no_proxies,
            decoder: decoder.as_ref(),
        },
    )
    .map_err(writing(&a.out))?;
    rec.output(&a.out);
    rec.default_path = Some(beside(&a.out));
    if let Some(path) = &a.topology {
        write_file(path, topology(model.config())?.to_toml()?.as_bytes())?;
        rec.output(path);
    }
    line(
        out,
        &json!({
            "out": a.out.display().to_string(),
            "folded": model.is_folded(),
            "proxies": !a.no_proxies,
            "decoder": decoder.is_some(),
        }),
    )
}

pub fn import(a: &ImportArgs, rec: &mut Recorder, out: &mut dyn Write) -> CliResult<()> {
    let imported = load_weights(&a.weights, rec)?;
    rec.config = json!({ "args": args_json(a) });
    let model = &imported.model;
    let topo = model.topology();
    let params: u64 = topo.weighted().map(|l| l.param_count()).sum();
    let summary = json!({
        "model": model.config(),
        "folded": model.is_folded(),
        "has_proxies": imported.has_proxies,
        "decoder": imported.decoder.as_ref().map(|d| d.config().clone()),
        "layers": topo.layers.len(),
        "parameters": params,
        "code_bits": model.config().code_bits(),
    });
    if a.json {
        return line(out, &summary);
    }
    let c = model.config();
    let mut text = format!(
        "F {}  precision {:?}  bottleneck {}  input {}x{}  classes {}\n",
        c.f, c.precision, c.bottleneck, c.input_size, c.input_size, c.classes
    );
    text += &format!(
        "folded {}  proxies {}  decoder {}\n",
        model.is_folded(),
        imported.has_proxies,
        imported.decoder.as_ref().map_or("none".to_string(), |d| format!("{:?}", d.variant()))
    );
    text += &format!("{} layers, {} parameters, {}-bit code\n", topo.layers.len(), params, c.code_bits());
    say(out, &text)
}
