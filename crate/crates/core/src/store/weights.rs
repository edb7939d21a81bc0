//! The HLMP1 binary weight format.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "HLMP1" | version | kind | header_len | header (JSON) | n_tensors
//! per tensor: name_len | name | ndim | dims... | f32 data (little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::model::{HeadLayout, Model, ModelConfig, ModelMeta};
use crate::probe::{Mlp, ProbeLoss, ProbeModel};
use crate::store::ExportMeta;
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"HLMP1";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Transformer = 0,
    Probe = 1,
}

pub type Tensor = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: WeightKind,
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_weights<W: Write>(mut w: W, file: &WeightFile) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    put_u32(&mut w, WEIGHTS_VERSION as usize)?;
    put_u32(&mut w, file.kind as usize)?;
    let header = serde_json::to_vec(&file.header)?;
    put_u32(&mut w, header.len())?;
    w.write_all(&header)?;
    put_u32(&mut w, file.tensors.len())?;
    for (name, dims, data) in &file.tensors {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidInput(format!("tensor {name} has {} values for shape {dims:?}", data.len())));
        }
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, dims.len())?;
        for &d in dims {
            put_u32(&mut w, d)?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

const MAX_HEADER: u32 = 64 << 20;

pub fn read_weights<R: Read>(mut r: R) -> Result<WeightFile> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Version {
            found: String::from_utf8_lossy(&magic).into_owned(),
            expected: "HLMP1".into(),
        });
    }
    let version = get_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: WEIGHTS_VERSION.to_string(),
        });
    }
    let kind = match get_u32(&mut r)? {
        0 => WeightKind::Transformer,
        1 => WeightKind::Probe,
        k => return Err(Error::InvalidInput(format!("unknown weight kind {k}"))),
    };
    let header_len = get_u32(&mut r)?;
    if header_len > MAX_HEADER {
        return Err(Error::InvalidInput("weight header too large".into()));
    }
    let mut header = vec![0u8; header_len as usize];
    r.read_exact(&mut header)?;
    let header = serde_json::from_slice(&header)?;
    let count = get_u32(&mut r)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = get_u32(&mut r)?;
        if name_len > 4096 {
            return Err(Error::InvalidInput("tensor name too long".into()));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::InvalidInput("tensor name is not UTF-8".into()))?;
        let ndim = get_u32(&mut r)?;
        if ndim > 8 {
            return Err(Error::InvalidInput(format!("tensor {name} has {ndim} dimensions")));
        }
        let dims = (0..ndim).map(|_| get_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut bytes = Vec::new();
        (&mut r).take(n as u64 * 4).read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::InvalidInput(format!("tensor {name} is truncated")));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, dims, data));
    }
    Ok(WeightFile { kind, header, tensors })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    meta: ModelMeta,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let header = serde_json::to_value(ModelHeader {
        config: model.config().clone(),
        meta: model.meta().clone(),
    })?;
    let file = WeightFile {
        kind: WeightKind::Transformer,
        header,
        tensors: model.tensors(),
    };
    write_weights(BufWriter::new(File::create(path)?), &file)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let file = read_weights(BufReader::new(File::open(path)?))?;
    if file.kind != WeightKind::Transformer {
        return Err(Error::InvalidInput(format!("{} does not hold transformer weights", path.display())));
    }
    let header: ModelHeader = serde_json::from_value(file.header)?;
    Model::from_tensors(header.config, header.meta, file.tensors)
}

#[derive(Serialize, Deserialize)]
struct ProbeHeader {
    loss: ProbeLoss,
    layout: HeadLayout,
    threshold: Option<f64>,
    n_layers: usize,
    /// Config hash and seed of the run that trained the probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<ExportMeta>,
}

/// Probe weights are stored at f32 precision. `run` is recorded in the header.
pub fn save_probe(probe: &ProbeModel, run: Option<&ExportMeta>, path: &Path) -> Result<()> {
    let header = serde_json::to_value(ProbeHeader {
        loss: probe.loss,
        layout: probe.layout,
        threshold: probe.threshold,
        n_layers: probe.mlp.weights.len(),
        run: run.cloned(),
    })?;
    let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut tensors = vec![
        ("input_mean".to_string(), vec![probe.input_mean.len()], f(&probe.input_mean)),
        ("input_std".to_string(), vec![probe.input_std.len()], f(&probe.input_std)),
    ];
    for (i, (w, b)) in probe.mlp.weights.iter().zip(&probe.mlp.biases).enumerate() {
        tensors.push((format!("layers.{i}.weight"), vec![w.nrows(), w.ncols()], f(w.transpose().as_slice())));
        tensors.push((format!("layers.{i}.bias"), vec![b.len()], f(b.as_slice())));
    }
    let file = WeightFile {
        kind: WeightKind::Probe,
        header,
        tensors,
    };
    write_weights(BufWriter::new(File::create(path)?), &file)
}

pub fn load_probe(path: &Path) -> Result<ProbeModel> {
    let file = read_weights(BufReader::new(File::open(path)?))?;
    if file.kind != WeightKind::Probe {
        return Err(Error::InvalidInput(format!("{} does not hold probe weights", path.display())));
    }
    let header: ProbeHeader = serde_json::from_value(file.header)?;
    let mut map: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = file
        .tensors
        .into_iter()
        .map(|(n, d, v)| (n, (d, v.into_iter().map(f64::from).collect())))
        .collect();
    let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::InvalidInput(format!("missing tensor {name}")));
    let input_mean = take("input_mean")?.1;
    let input_std = take("input_std")?.1;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for i in 0..header.n_layers {
        let (dims, data) = take(&format!("layers.{i}.weight"))?;
        let [r, c] = dims[..] else {
            return Err(Error::InvalidInput(format!("layer {i} weight is not 2-d")));
        };
        weights.push(DMatrix::from_row_slice(r, c, &data));
        biases.push(RowDVector::from_vec(take(&format!("layers.{i}.bias"))?.1));
    }
    Ok(ProbeModel {
        mlp: Mlp { weights, biases },
        loss: header.loss,
        layout: header.layout,
        input_mean,
        input_std,
        threshold: header.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_induction_model;
    use crate::Intervention;

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hlmp");
        let m = build_induction_model(16, 3).unwrap();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let toks = [7, 3, 9, 7];
        assert_eq!(back.forward(&toks, &Intervention::none()).unwrap(), m.forward(&toks, &Intervention::none()).unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"HLMP1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
    }

    #[test]
    fn probe_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.hlmp");
        let mlp = Mlp::new(&[3, 5, 4], &mut crate::seed::rng(1));
        let probe = ProbeModel {
            mlp,
            loss: ProbeLoss::Asymmetric,
            layout: HeadLayout { n_layers: 2, n_heads: 2 },
            input_mean: vec![0.1, -0.2, 0.3],
            input_std: vec![1.0, 2.0, 0.5],
            threshold: Some(0.4),
        };
        let run = ExportMeta::new("abc", 9);
        save_probe(&probe, Some(&run), &path).unwrap();
        let back = load_probe(&path).unwrap();
        let f32s = |m: &Mlp| -> Vec<f32> { m.weights.iter().flat_map(|w| w.iter()).map(|&v| v as f32).collect() };
        assert_eq!(f32s(&back.mlp), f32s(&probe.mlp));
        assert_eq!((back.loss, back.layout, back.threshold), (probe.loss, probe.layout, probe.threshold));
        let file = read_weights(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(file.header["run"]["config_hash"], "abc");
        assert_eq!(file.header["run"]["seed"], 9);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Vec::new();
        write_weights(&mut bytes, &WeightFile { kind: WeightKind::Probe, header: serde_json::json!({}), tensors: vec![] }).unwrap();
        let mut bad = bytes.clone();
        bad[5] = 2;
        assert!(matches!(read_weights(&bad[..]), Err(Error::Version { .. })));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(&bad[..]), Err(Error::Version { .. })));
        assert!(read_weights(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let file = WeightFile {
            kind: WeightKind::Transformer,
            header: serde_json::json!({"a": 1}),
            tensors: vec![("t".into(), vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])],
        };
        let mut bytes = Vec::new();
        write_weights(&mut bytes, &file).unwrap();
        assert_eq!(read_weights(&bytes[..]).unwrap(), file);
        assert!(read_weights(&bytes[..bytes.len() - 2]).is_err());
    }
}
