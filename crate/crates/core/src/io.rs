//! On-disk formats: checkpoints, datasets, feature dumps, reports, configs.
//!
//! Checkpoint layout:
//!
//! ```text
//! otmf-checkpoint 1
//! spec {"layer_dims":[8,16,6],"activation":"tanh","num_classes":4}
//! section backbone 4
//! layer layer0.weight 128
//! ...
//! section head 1 2
//! layer head.weight 24
//! layer head.bias 4
//! end
//! <little-endian f64 values of every layer, in header order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Batch, ModelSpec, TaskId, ToyModel};
use crate::param::ParamVector;
use crate::pipeline::RunConfig;

const MAGIC: &str = "otmf-checkpoint 1";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn push_section(header: &mut String, data: &mut Vec<u8>, title: &str, params: &ParamVector) {
    header.push_str(&format!("section {title} {}\n", params.num_layers()));
    for (name, values) in params.layers() {
        header.push_str(&format!("layer {name} {}\n", values.len()));
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &ToyModel) -> Result<Vec<u8>> {
    let spec = serde_json::to_string(model.spec()).map_err(|e| Error::Data(e.to_string()))?;
    let mut header = format!("{MAGIC}\nspec {spec}\n");
    let mut data = Vec::new();
    push_section(&mut header, &mut data, "backbone", model.backbone());
    for (task, head) in model.heads() {
        push_section(&mut header, &mut data, &format!("head {}", task.0), head);
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&data);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("malformed checkpoint: {}", msg.into()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyModel> {
    let marker = b"\nend\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing `end` line"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("unknown magic line"));
    }
    let spec_json = lines
        .next()
        .and_then(|l| l.strip_prefix("spec "))
        .ok_or_else(|| bad("missing spec line"))?;
    let spec: ModelSpec = serde_json::from_str(spec_json).map_err(|e| bad(e.to_string()))?;
    spec.validate()?;

    let mut data = bytes[split..].chunks_exact(8);
    if data.remainder().len() != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut backbone = None;
    let mut heads = BTreeMap::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("truncated header"))?;
        if line == "end" {
            break;
        }
        let words: Vec<&str> = line.split(' ').collect();
        let (target, count) = match words.as_slice() {
            ["section", "backbone", n] => (None, *n),
            ["section", "head", id, n] => {
                let id: u32 = id.parse().map_err(|_| bad(format!("bad task id in `{line}`")))?;
                (Some(TaskId(id)), *n)
            }
            _ => return Err(bad(format!("unexpected line `{line}`"))),
        };
        let count: usize = count.parse().map_err(|_| bad(format!("bad layer count in `{line}`")))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let (name, len) = match line.split(' ').collect::<Vec<_>>().as_slice() {
                ["layer", name, len] => (
                    name.to_string(),
                    len.parse::<usize>().map_err(|_| bad(format!("bad length in `{line}`")))?,
                ),
                _ => return Err(bad(format!("expected a layer line, got `{line}`"))),
            };
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                let chunk = data.next().ok_or_else(|| bad("payload shorter than header"))?;
                values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
            }
            layers.push((name, values));
        }
        let params = ParamVector::new(layers)?;
        match target {
            None if backbone.is_none() => backbone = Some(params),
            None => return Err(bad("two backbone sections")),
            Some(task) => {
                if heads.insert(task, params).is_some() {
                    return Err(bad(format!("duplicate head for {task}")));
                }
            }
        }
    }
    if data.next().is_some() {
        return Err(bad("payload longer than header"));
    }
    let backbone = backbone.ok_or_else(|| bad("no backbone section"))?;
    ToyModel::new(spec, backbone, heads)
}

pub fn save_checkpoint(path: &Path, model: &ToyModel) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Delimited matrix with a one-line header. Floats use the shortest
/// representation that parses back to the same value.
pub fn encode_csv(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn encode_batch(batch: &Batch) -> String {
    let d = batch.inputs.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    let rows = batch.inputs.row_iter().zip(&batch.labels).map(|(x, y)| {
        let mut r: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        r.push(y.to_string());
        r
    });
    encode_csv(&header, rows)
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("line {line}: non-finite value")));
    }
    Ok(v)
}

pub fn decode_batch(text: &str) -> Result<Batch> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.last() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Data("dataset header must end with `label`".into()));
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Data(format!(
                "line {}: expected {} fields, got {}",
                n + 2,
                d + 1,
                fields.len()
            )));
        }
        for f in &fields[..d] {
            data.push(parse_f64(f, n + 2)?);
        }
        labels.push(
            fields[d]
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad label `{}`", n + 2, fields[d])))?,
        );
    }
    Batch::new(Matrix::new(labels.len(), d, data)?, labels)
}

pub fn save_batch(path: &Path, batch: &Batch) -> Result<()> {
    write_bytes(path, encode_batch(batch).as_bytes())
}

pub fn load_batch(path: &Path) -> Result<Batch> {
    decode_batch(&read_text(path)?)
}

/// Feature clouds tagged by source model: columns `f0.., model`.
pub fn encode_features(clouds: &[(&str, &Matrix)]) -> Result<String> {
    let k = clouds.first().map_or(0, |(_, m)| m.cols());
    if let Some((tag, _)) = clouds.iter().find(|(_, m)| m.cols() != k) {
        return Err(Error::shape(*tag, "feature clouds differ in width"));
    }
    let mut header: Vec<String> = (0..k).map(|j| format!("f{j}")).collect();
    header.push("model".into());
    let rows = clouds.iter().flat_map(|(tag, m)| {
        m.row_iter().map(move |r| {
            let mut row: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
            row.push(tag.to_string());
            row
        })
    });
    Ok(encode_csv(&header, rows))
}

/// Parses a feature dump back into `(tag, cloud)` pairs in first-seen order.
pub fn decode_features(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty feature file".into()))?;
    let k = header.split(',').count() - 1;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(Error::Data(format!("line {}: expected {} fields", n + 2, k + 1)));
        }
        let tag = fields[k];
        if out.last().map(|(t, _)| t.as_str()) != Some(tag) {
            out.push((tag.to_string(), Vec::new()));
        }
        let slot = &mut out.last_mut().expect("pushed").1;
        for f in &fields[..k] {
            slot.push(parse_f64(f, n + 2)?);
        }
    }
    out.into_iter()
        .map(|(tag, v)| Ok((tag, Matrix::new(v.len() / k.max(1), k, v)?)))
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value)?.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Parses a run configuration; omitted fields take their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_text(path)?)
}

pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_head;

    fn model() -> ToyModel {
        let spec = ModelSpec { layer_dims: vec![3, 4, 2], num_classes: 3, ..ModelSpec::default() };
        ToyModel::init(spec.clone(), 5)
            .unwrap()
            .with_head(TaskId(2), init_head(&spec, 1).unwrap())
            .unwrap()
            .with_head(TaskId(0), init_head(&spec, 2).unwrap())
            .unwrap()
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode_checkpoint(&model()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(decode_checkpoint(&longer).is_err());
        assert!(decode_checkpoint(b"nonsense").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("layer0.weight 12", "layer0.weight 11");
        assert!(decode_checkpoint(text.as_bytes()).is_err());
    }

    #[test]
    fn batch_csv_round_trip() {
        let x = Matrix::from_rows(&[[0.1, -2.5e-17], [1.0 / 3.0, 7.0]]).unwrap();
        let b = Batch::new(x, vec![1, 0]).unwrap();
        let text = encode_batch(&b);
        assert!(text.starts_with("x0,x1,label\n"));
        assert_eq!(decode_batch(&text).unwrap(), b);
        assert!(decode_batch("x0,label\n1.0\n").is_err());
        assert!(decode_batch("x0,label\nNaN,1\n").is_err());
    }

    #[test]
    fn feature_dump_round_trip() {
        let a = Matrix::from_rows(&[[0.5, 0.25], [1e-300, -3.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0, 1.0]]).unwrap();
        let text = encode_features(&[("merged", &a), ("sft", &b)]).unwrap();
        let back = decode_features(&text).unwrap();
        assert_eq!(back, vec![("merged".to_string(), a), ("sft".to_string(), b)]);
    }

    #[test]
    fn config_defaults_and_rejections() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        let cfg = parse_config("seeds = [3, 4]\n[fusion]\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.fusion.alpha, 0.5);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert!(matches!(parse_config("[fusion]\nalpha = 2.0\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("bogus = 1\n"), Err(Error::Config(_))));
        let round = parse_config(&config_to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }
}
