//! Self-describing checkpoint: a UTF-8 header terminated by `end\n`, then every
//! parameter as raw little-endian `f32` values in header order.
//!
//! ```text
//! ridgematch-checkpoint 1
//! stage 1
//! encoder image_size=32 patch_size=8 ...
//! fusion none
//! loss alpha_pos=2 alpha_neg=40 tau=0.5 margin=0.7
//! seed 7
//! epochs 200
//! trace 0.81 0.42 ...
//! param enc.patch.w 64 64
//! ...
//! end
//! ```

use std::collections::HashMap;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::msloss::LossConfig;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &str = "ridgematch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub encoder: EncoderConfig,
    pub fusion: Option<FusionConfig>,
    pub loss: LossConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub params: ParamStore<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn fields(tokens: &[&str]) -> Result<HashMap<String, String>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("expected key=value, got {t:?}")))
        })
        .collect()
}

fn take<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| bad(format!("missing header field {key}")))?
        .parse()
        .map_err(|_| bad(format!("bad value for header field {key}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let e = &self.encoder;
        let mut h = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nstage {}\n", self.stage);
        h += &format!(
            "encoder image_size={} patch_size={} width={} layers={} heads={} mlp_hidden={} head_hidden={} embed_dim={}\n",
            e.image_size, e.patch_size, e.width, e.layers, e.heads, e.mlp_hidden, e.head_hidden, e.embed_dim
        );
        match &self.fusion {
            Some(f) => {
                h += &format!(
                    "fusion blocks={} heads={} mlp_hidden={}\n",
                    f.blocks, f.heads, f.mlp_hidden
                )
            }
            None => h += "fusion none\n",
        }
        let l = &self.loss;
        h += &format!(
            "loss alpha_pos={:?} alpha_neg={:?} tau={:?} margin={:?}\n",
            l.alpha_pos, l.alpha_neg, l.tau, l.margin
        );
        h += &format!("seed {}\nepochs {}\ntrace", self.seed, self.epochs);
        for v in &self.loss_trace {
            h += &format!(" {v:?}");
        }
        h.push('\n');
        for (name, m) in self.params.iter() {
            h += &format!("param {name} {} {}\n", m.rows(), m.cols());
        }
        h += "end\n";
        let mut out = h.into_bytes();
        for m in self.params.values() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = b"\nend\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("header terminator not found"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let mut body = &bytes[end + marker.len()..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or("");
        match first.split_once(' ') {
            Some((CHECKPOINT_MAGIC, v)) if v == CHECKPOINT_VERSION.to_string() => {}
            Some((CHECKPOINT_MAGIC, v)) => return Err(bad(format!("unsupported version {v}"))),
            _ => return Err(bad("not a checkpoint file")),
        }
        let mut stage = None;
        let mut encoder = None;
        let mut fusion = None;
        let mut loss = None;
        let mut seed = None;
        let mut epochs = None;
        let mut loss_trace = Vec::new();
        let mut params = ParamStore::new();
        for line in lines {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let Some((&key, rest)) = tokens.split_first() else {
                continue;
            };
            let single = || -> Result<&str> {
                match rest {
                    [v] => Ok(v),
                    _ => Err(bad(format!("malformed {key} line"))),
                }
            };
            match key {
                "stage" => stage = Some(single()?.parse::<u8>().map_err(|_| bad("bad stage"))?),
                "seed" => seed = Some(single()?.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "epochs" => epochs = Some(single()?.parse::<usize>().map_err(|_| bad("bad epochs"))?),
                "encoder" => {
                    let f = fields(rest)?;
                    encoder = Some(EncoderConfig {
                        image_size: take(&f, "image_size")?,
                        patch_size: take(&f, "patch_size")?,
                        width: take(&f, "width")?,
                        layers: take(&f, "layers")?,
                        heads: take(&f, "heads")?,
                        mlp_hidden: take(&f, "mlp_hidden")?,
                        head_hidden: take(&f, "head_hidden")?,
                        embed_dim: take(&f, "embed_dim")?,
                    });
                }
                "fusion" => {
                    fusion = Some(if rest == ["none"] {
                        None
                    } else {
                        let f = fields(rest)?;
                        Some(FusionConfig {
                            blocks: take(&f, "blocks")?,
                            heads: take(&f, "heads")?,
                            mlp_hidden: take(&f, "mlp_hidden")?,
                        })
                    });
                }
                "loss" => {
                    let f = fields(rest)?;
                    loss = Some(LossConfig {
                        alpha_pos: take(&f, "alpha_pos")?,
                        alpha_neg: take(&f, "alpha_neg")?,
                        tau: take(&f, "tau")?,
                        margin: take(&f, "margin")?,
                    });
                }
                "trace" => {
                    loss_trace = rest
                        .iter()
                        .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad trace value {v}"))))
                        .collect::<Result<_>>()?;
                }
                "param" => {
                    let [name, rows, cols] = rest else {
                        return Err(bad(format!("malformed param line {line:?}")));
                    };
                    let rows: usize = rows.parse().map_err(|_| bad(format!("bad rows for {name}")))?;
                    let cols: usize = cols.parse().map_err(|_| bad(format!("bad cols for {name}")))?;
                    let n = rows * cols * 4;
                    if body.len() < n {
                        return Err(bad(format!("truncated data for {name}")));
                    }
                    let values = body[..n]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    body = &body[n..];
                    params
                        .insert(*name, Matrix::from_vec(rows, cols, values)?)
                        .map_err(|e| bad(e.to_string()))?;
                }
                other => return Err(bad(format!("unknown header line {other:?}"))),
            }
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes after parameter data", body.len())));
        }
        Ok(Self {
            stage: stage.ok_or_else(|| bad("missing stage"))?,
            encoder: encoder.ok_or_else(|| bad("missing encoder config"))?,
            fusion: fusion.ok_or_else(|| bad("missing fusion config"))?,
            loss: loss.ok_or_else(|| bad("missing loss config"))?,
            seed: seed.ok_or_else(|| bad("missing seed"))?,
            epochs: epochs.ok_or_else(|| bad("missing epochs"))?,
            loss_trace,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params
            .insert(
                "enc.a",
                Matrix::from_rows(&[&[1.0f32, -0.0, f32::MIN_POSITIVE], &[3.5e-8, 7.0, -1e30]]),
            )
            .unwrap();
        params.insert("fus.b", Matrix::from_rows(&[&[0.1f32]])).unwrap();
        Checkpoint {
            stage: 2,
            encoder: EncoderConfig::desk(),
            fusion: Some(FusionConfig::default()),
            loss: LossConfig::stage2(),
            seed: 99,
            epochs: 3,
            loss_trace: vec![0.5, 0.1 + 0.2, 1e-300],
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        for (a, b) in back.params.values().iter().zip(c.params.values()) {
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.loss_trace, c.loss_trace);
        assert_eq!(back.fusion, c.fusion);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let v2 = String::from_utf8_lossy(&bytes).replacen("checkpoint 1", "checkpoint 2", 1);
        let e = Checkpoint::from_bytes(v2.as_bytes()).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
    }
}
