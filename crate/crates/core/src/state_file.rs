//! The `PINS` model-state container.
//!
//! Layout (little-endian): magic `PINS`, version u16, flags u16 (bit0: the
//! anchors came from the data file), u32 length plus the resolved config as
//! JSON, u32 tensor count, then per tensor: u16 name length, name bytes, u8
//! rank, u32 per dim, f64 payload. Scalars have rank 0 and one value.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::encoder::{AnchorSource, EncoderParams, TextAnchors};
use crate::error::{Error, Result};
use crate::model::{Heads, LinearHead, Params, TRAINABLE};
use crate::noise::NoiseGenParams;
use crate::numeric::{Mat64, Vec64};
use crate::optim::{Adam, AdamConfig};
use crate::pinf::ByteReader;
use crate::rng::Streams;
use crate::train::{CurveRow, TrainState};

pub const MAGIC: &[u8; 4] = b"PINS";
pub const VERSION: u16 = 1;
pub const FLAG_LOADED_ANCHORS: u16 = 1;

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn trainable_dims(p: &Params) -> Vec<Vec<usize>> {
    let m = |m: &Mat64| vec![m.rows(), m.cols()];
    vec![
        m(&p.encoder.lora_b),
        m(&p.encoder.lora_a),
        m(&p.noise_gen.w_q),
        m(&p.noise_gen.w_k),
        m(&p.noise_gen.w_v),
        m(&p.noise_gen.w_mu),
        m(&p.noise_gen.w_var),
        vec![p.heads.clean.weight.len()],
        vec![],
        vec![p.heads.noisy.weight.len()],
        vec![],
    ]
}

pub fn encode_state(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = match state.anchors.source {
        AnchorSource::Loaded => FLAG_LOADED_ANCHORS,
        AnchorSource::Synthetic => 0,
    };
    out.extend_from_slice(&flags.to_le_bytes());
    let cfg = state.config.to_json();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let mut body = Vec::new();
    let mut count = 0u32;
    let mut put = |name: &str, dims: &[usize], data: &[f64]| {
        push_tensor(&mut body, name, dims, data);
        count += 1;
    };
    let p = &state.params;
    put("encoder.projection", &[p.encoder.projection.rows(), p.encoder.projection.cols()], p.encoder.projection.as_slice());
    let dims = trainable_dims(p);
    for (((name, _), t), d) in TRAINABLE.iter().zip(p.trainable()).zip(&dims) {
        put(name, d, t);
    }
    for (((name, _), t), d) in TRAINABLE.iter().zip(&state.adam.m).zip(&dims) {
        put(&format!("adam.m.{name}"), d, t);
    }
    for (((name, _), t), d) in TRAINABLE.iter().zip(&state.adam.v).zip(&dims) {
        put(&format!("adam.v.{name}"), d, t);
    }
    put("anchors.real", &[state.anchors.real.len()], &state.anchors.real);
    put("anchors.fake", &[state.anchors.fake.len()], &state.anchors.fake);
    put("meta.step", &[], &[state.adam.step as f64]);
    let curves: Vec<f64> = state
        .curves
        .iter()
        .flat_map(|r| [r.step as f64, r.loss_base, r.loss_vpn, r.loss_total, r.batch_acc])
        .collect();
    put("curves", &[state.curves.len(), 5], &curves);

    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected PINS"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let flags = r.u16("flags")?;
    if flags & !FLAG_LOADED_ANCHORS != 0 {
        return Err(Error::format(6, format!("unknown flags {flags:#06x}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.offset();
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::format(cfg_at, "config is not UTF-8"))?;
    let config = RunConfig::from_json(cfg_text).map_err(|e| Error::format(cfg_at, e.to_string()))?;

    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::format(at, "tensor size overflow"))?;
        let data = r.f64s(n, &name)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(at, format!("non-finite values in {name}")));
        }
        if tensors.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(Error::format(at, format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;

    let end = bytes.len() as u64;
    let curve_n = tensors.get("curves").and_then(|t| t.dims.first().copied()).unwrap_or(0);
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(end, format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::format(
                end,
                format!("tensor {name} has shape {:?}, expected {:?}", t.dims, dims),
            ));
        }
        Ok(t.data)
    };
    let (dd, di, r_lora, h) = (config.feature_dim, config.input_dim, config.lora_rank, config.hidden_dim());
    let mat = |rows, cols, data| Mat64::new(rows, cols, data).map_err(|e| Error::format(end, e.to_string()));
    let vec = |data| Vec64::new(data).map_err(|e| Error::format(end, e.to_string()));

    let projection = mat(dd, di, take("encoder.projection", &[dd, di])?)?;
    let shapes: [Vec<usize>; 11] = [
        vec![dd, r_lora],
        vec![r_lora, di],
        vec![h, dd],
        vec![h, dd],
        vec![h, dd],
        vec![h, dd],
        vec![h, dd],
        vec![dd],
        vec![],
        vec![dd],
        vec![],
    ];
    let mut params_t = Vec::with_capacity(11);
    for ((name, _), s) in TRAINABLE.iter().zip(&shapes) {
        params_t.push(take(name, s)?);
    }
    let mut moments = |prefix: &str| -> Result<Vec<Vec<f64>>> {
        TRAINABLE
            .iter()
            .zip(&shapes)
            .map(|((name, _), s)| take(&format!("{prefix}{name}"), s))
            .collect()
    };
    let m = moments("adam.m.")?;
    let v = moments("adam.v.")?;
    let real = vec(take("anchors.real", &[dd])?)?;
    let fake = vec(take("anchors.fake", &[dd])?)?;
    let step = take("meta.step", &[])?[0];
    let curve_data = take("curves", &[curve_n, 5])?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format(end, format!("unexpected tensor {extra}")));
    }
    if step < 0.0 || step.fract() != 0.0 {
        return Err(Error::format(end, format!("bad step counter {step}")));
    }

    let mut it = params_t.into_iter();
    let mut next = || it.next().unwrap();
    let encoder = EncoderParams {
        projection,
        lora_b: mat(dd, r_lora, next())?,
        lora_a: mat(r_lora, di, next())?,
        alpha: config.lora_alpha,
        dropout_rate: config.dropout_rate,
    };
    let noise_gen = NoiseGenParams {
        w_q: mat(h, dd, next())?,
        w_k: mat(h, dd, next())?,
        w_v: mat(h, dd, next())?,
        w_mu: mat(h, dd, next())?,
        w_var: mat(h, dd, next())?,
    };
    let clean = LinearHead {
        weight: vec(next())?,
        bias: next()[0],
    };
    let noisy = LinearHead {
        weight: vec(next())?,
        bias: next()[0],
    };
    let params = Params {
        encoder,
        noise_gen,
        heads: Heads { clean, noisy },
    };
    let anchors = TextAnchors {
        real,
        fake,
        source: if flags & FLAG_LOADED_ANCHORS != 0 {
            AnchorSource::Loaded
        } else {
            AnchorSource::Synthetic
        },
    };
    let adam = Adam {
        config: AdamConfig::from_config(&config),
        m,
        v,
        step: step as u64,
    };
    let curves = curve_data
        .chunks_exact(5)
        .map(|c| CurveRow {
            step: c[0] as u64,
            loss_base: c[1],
            loss_vpn: c[2],
            loss_total: c[3],
            batch_acc: c[4],
        })
        .collect();
    Ok(TrainState {
        streams: Streams::new(config.seed),
        config,
        params,
        anchors,
        adam,
        curves,
    })
}

pub fn save_state(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode_state(state))?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_state(&std::fs::read(path)?)
}
