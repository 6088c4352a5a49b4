//! Checkpoint container.
//!
//! Layout, little-endian: `LGBP`, version, dtype byte [`DTYPE_CONTAINER`],
//! two zero bytes; u32 length and UTF-8 text (config, both kernel grids,
//! optimizer state, history); u32 tensor count; then per tensor a u32 name
//! length, the name, and a complete tensor record. Adam moments are stored
//! under `adam.m.<param>` and `adam.v.<param>`.

use std::io::{Read, Write};
use std::path::Path;

use crate::bsn::DspmcKernelSpec;
use crate::config::{Config, MaskConfig};
use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::params::ParamStore;
use crate::tensor::{TensorRecord, MAGIC, VERSION};
use crate::train::{LogRow, TrainState};

/// Distinguishes a container from a bare tensor record.
pub const DTYPE_CONTAINER: u8 = 0x80;

const SECTIONS: [&str; 5] = ["config", "local_spec", "global_spec", "state", "history"];

fn text_of(state: &TrainState, mask: &MaskConfig) -> String {
    let cfg = Config { network: state.model.config.clone(), train: state.config.clone(), mask: mask.clone() };
    let mut s = format!("[config]\n{}", cfg.to_text());
    s += &format!("[local_spec]\n{}", state.model.local_spec().to_text());
    s += &format!("[global_spec]\n{}", state.model.global_spec().to_text());
    let mode = match state.model.mode() {
        Mode::Train => "train",
        Mode::Test => "test",
    };
    s += &format!(
        "[state]\nstep = {}\nmode = {mode}\npending_loss = {}\npending_count = {}\n",
        state.step, state.pending_loss.0, state.pending_loss.1
    );
    s += "[history]\n";
    for r in &state.history {
        s += &format!("{}\t{}\t{}\t{}\n", r.step, r.loss, r.psnr, r.ssim);
    }
    s
}

fn split_sections(text: &str) -> Result<Vec<String>> {
    let mut out = vec![String::new(); SECTIONS.len()];
    let mut cur: Option<usize> = None;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let i = SECTIONS.iter().position(|s| *s == name).ok_or_else(|| Error::Format(format!("unknown section [{name}]")))?;
            cur = Some(i);
            continue;
        }
        let i = cur.ok_or_else(|| Error::Format("text before first section".into()))?;
        out[i] += line;
        out[i].push('\n');
    }
    Ok(out)
}

fn state_field<'a>(body: &'a str, key: &str) -> Result<&'a str> {
    body.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Format(format!("state field '{key}' missing")))
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad number '{s}'")))
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint(w: &mut impl Write, state: &TrainState, mask: &MaskConfig) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_CONTAINER, 0, 0])?;
    let text = text_of(state, mask);
    write_u32(w, text.len())?;
    w.write_all(text.as_bytes())?;
    let mut named: Vec<(String, &crate::tensor::Tensor)> = Vec::new();
    for (k, t) in state.model.params.iter() {
        named.push((k.clone(), t));
    }
    for (prefix, store) in [("adam.m.", &state.m), ("adam.v.", &state.v)] {
        for (k, t) in store.iter() {
            named.push((format!("{prefix}{k}"), t));
        }
    }
    write_u32(w, named.len())?;
    for (name, t) in named {
        write_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        TensorRecord::from_tensor(t).write_to(w)?;
    }
    Ok(())
}

/// Reads a checkpoint back into a train state and the mask settings it was built with.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(TrainState, MaskConfig)> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if head[4] != VERSION || head[5] != DTYPE_CONTAINER {
        return Err(Error::Format(format!("not a version {VERSION} checkpoint container")));
    }
    let n = read_u32(r)?;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)?;
    let text = String::from_utf8(raw).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))?;
    let sec = split_sections(&text)?;
    let cfg = Config::parse(&sec[0])?;
    let local = DspmcKernelSpec::from_text(&sec[1])?;
    let global = DspmcKernelSpec::from_text(&sec[2])?;

    let count = read_u32(r)?;
    let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    for _ in 0..count {
        let len = read_u32(r)?;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = TensorRecord::read_from(r)?.to_tensor::<f32>()?;
        if let Some(k) = name.strip_prefix("adam.m.") {
            m.insert(k, t)?;
        } else if let Some(k) = name.strip_prefix("adam.v.") {
            v.insert(k, t)?;
        } else {
            params.insert(&name, t)?;
        }
    }
    let mut model = Model::from_parts(cfg.network.clone(), local, global, params)?;
    let st = &sec[3];
    model.set_mode(match state_field(st, "mode")? {
        "train" => Mode::Train,
        "test" => Mode::Test,
        other => return Err(Error::Format(format!("unknown mode '{other}'"))),
    });
    let mut history = Vec::new();
    for line in sec[4].lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Format(format!("bad history row '{line}'")));
        }
        history.push(LogRow { step: num(f[0])?, loss: num(f[1])?, psnr: num(f[2])?, ssim: num(f[3])? });
    }
    let state = TrainState {
        model,
        config: cfg.train,
        m,
        v,
        step: num(state_field(st, "step")?)?,
        history,
        pending_loss: (num(state_field(st, "pending_loss")?)?, num(state_field(st, "pending_count")?)?),
    };
    state.validate()?;
    Ok((state, cfg.mask))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, mask: &MaskConfig) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, state, mask)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, MaskConfig)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::noise::CorrMask;
    use crate::tensor::Tensor;
    use crate::train::{run, Sample, TrainConfig};

    fn state() -> TrainState {
        let cfg = NetworkConfig { width: 4, local_layers: 1, dtb_count: 1, ..NetworkConfig::default() };
        let mask = CorrMask::from_fn(10, 0.05, |dy, dx| dy.abs() <= 1 && dx.abs() <= 1);
        let model = Model::build(cfg, &mask, 5).unwrap();
        TrainState::new(model, TrainConfig { batch: 2, patch: 20, epochs: 2, log_every: 1, lr: 1e-3, ..TrainConfig::default() }).unwrap()
    }

    fn data() -> Vec<Sample> {
        (0..3)
            .map(|i| Sample {
                noisy: Tensor::from_fn([1, 3, 20, 20], |[_, c, y, x]| ((c * 5 + y * 3 + x * 7 + i) % 13) as f32 / 13.0),
                clean: None,
            })
            .collect()
    }

    fn bytes(st: &TrainState, mask: &MaskConfig) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(&mut b, st, mask).unwrap();
        b
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut st = state();
        run(&mut st, &data(), &[], Some(3), &mut ()).unwrap();
        let mask = MaskConfig { path: Some("m.txt".into()), ..MaskConfig::default() };
        let b = bytes(&st, &mask);
        let (back, mask_back) = read_checkpoint(&mut b.as_slice()).unwrap();
        // History holds NaN metrics (no references), so compare fields and bytes.
        assert_eq!((&back.model, &back.m, &back.v, back.step), (&st.model, &st.m, &st.v, st.step));
        assert_eq!(back.history.len(), 3);
        assert_eq!(mask_back, mask);
        assert_eq!(bytes(&back, &mask), b);
        assert!(back.history.iter().all(|r| r.psnr.is_nan()));
    }

    #[test]
    fn resume_from_bytes_matches_uninterrupted_run() {
        let mut full = state();
        run(&mut full, &data(), &[], None, &mut ()).unwrap();
        let mut part = state();
        run(&mut part, &data(), &[], Some(2), &mut ()).unwrap();
        let b = bytes(&part, &MaskConfig::default());
        let (mut resumed, _) = read_checkpoint(&mut b.as_slice()).unwrap();
        run(&mut resumed, &data(), &[], None, &mut ()).unwrap();
        assert_eq!(bytes(&resumed, &MaskConfig::default()), bytes(&full, &MaskConfig::default()));
    }

    #[test]
    fn header_and_corruption() {
        let b = bytes(&state(), &MaskConfig::default());
        assert_eq!(&b[..8], b"LGBP\x01\x80\x00\x00");
        let mut bad = b.clone();
        bad[5] = 0;
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        assert!(read_checkpoint(&mut &b[..b.len() - 3]).is_err());
        let tensor = TensorRecord::from_tensor(&Tensor::<f32>::zeros([1, 1, 1, 1])).to_bytes().unwrap();
        assert!(read_checkpoint(&mut tensor.as_slice()).is_err());
    }
}
