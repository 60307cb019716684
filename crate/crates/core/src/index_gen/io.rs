//! Serialization of trained index-network parameters and client indices.
//!
//! Parameter file layout (little-endian):
//!
//! ```text
//! magic "DSAI" | u32 version = 1 | u32 d_emb | u32 d_index
//! decomposition mlp | reconstruction mlp
//! mlp: u32 n_layers, then per layer:
//!   u32 in_dim | u32 out_dim | u32 activation (0 identity, 1 tanh, 2 relu)
//!   in_dim * out_dim f64 weights (row-major) | out_dim f64 bias
//! ```
//!
//! Client indices export to CSV with header
//! `client_id,domain_id,part,dim_0..dim_{d-1}` and one row per
//! (client, part in {f, l}). Values are printed with Rust's shortest
//! round-trip formatting, so reading the CSV back is lossless.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::smallnet::{Activation, DenseParams, Matrix, MlpLayer, MlpParams};

use super::{ClientIndex, DsaIgnParams};

const MAGIC: &[u8; 4] = b"DSAI";
const VERSION: u32 = 1;

fn write_mlp(buf: &mut Vec<u8>, mlp: &MlpParams) {
    buf.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
    for layer in &mlp.layers {
        buf.extend_from_slice(&(layer.params.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.params.out_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&layer.activation.code().to_le_bytes());
        for &v in layer.params.weight.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &layer.params.bias {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_index_params(params: &DsaIgnParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.d_emb as u32).to_le_bytes());
    buf.extend_from_slice(&(params.d_index as u32).to_le_bytes());
    write_mlp(&mut buf, &params.decomposition);
    write_mlp(&mut buf, &params.reconstruction);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                field,
                detail: format!(
                    "needs {n} bytes but only {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64_vec(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let offset = self.pos;
        let b = self.take(8 * n, field)?;
        let out: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(idx) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: offset + 8 * idx,
                field,
                detail: "non-finite value".into(),
            });
        }
        Ok(out)
    }

    fn mlp(&mut self) -> Result<MlpParams> {
        let n_layers = self.u32("n_layers")?;
        let mut layers = Vec::with_capacity(n_layers as usize);
        for _ in 0..n_layers {
            let in_dim = self.u32("in_dim")? as usize;
            let out_dim = self.u32("out_dim")? as usize;
            let act_offset = self.pos;
            let code = self.u32("activation")?;
            let activation = Activation::from_code(code).ok_or(Error::Format {
                offset: act_offset,
                field: "activation",
                detail: format!("unknown activation code {code}"),
            })?;
            let weight = Matrix::from_vec(in_dim, out_dim, self.f64_vec(in_dim * out_dim, "weight")?)?;
            let bias = self.f64_vec(out_dim, "bias")?;
            layers.push(MlpLayer {
                params: DenseParams { weight, bias },
                activation,
            });
        }
        Ok(MlpParams { layers })
    }
}

pub fn load_index_params(path: &Path) -> Result<DsaIgnParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            field: "magic",
            detail: format!("expected DSAI, got {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let d_emb = r.u32("d_emb")? as usize;
    let d_index = r.u32("d_index")? as usize;
    let decomposition = r.mlp()?;
    let reconstruction = r.mlp()?;
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            field: "eof",
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(DsaIgnParams {
        decomposition,
        reconstruction,
        d_emb,
        d_index,
    })
}

/// One exported client index with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexRecord {
    pub client_id: u32,
    pub domain_id: u32,
    pub index: ClientIndex,
}

pub fn write_index_csv(records: &[IndexRecord], path: &Path) -> Result<()> {
    let dim = records
        .first()
        .map(|r| r.index.beta_f.len())
        .unwrap_or(0);
    let mut out = String::from("client_id,domain_id,part");
    for d in 0..dim {
        out.push_str(&format!(",dim_{d}"));
    }
    out.push('\n');
    for record in records {
        for (part, values) in [("f", &record.index.beta_f), ("l", &record.index.beta_l)] {
            out.push_str(&format!("{},{},{part}", record.client_id, record.domain_id));
            for v in values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_index_csv(path: &Path) -> Result<Vec<IndexRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        detail: "empty file".into(),
    })?;
    let header_fields: Vec<&str> = header.split(',').collect();
    if header_fields.len() < 4
        || header_fields[0] != "client_id"
        || header_fields[1] != "domain_id"
        || header_fields[2] != "part"
    {
        return Err(Error::Csv {
            line: 1,
            detail: format!("unexpected header `{header}`"),
        });
    }
    let dim = header_fields.len() - 3;

    struct Row {
        client_id: u32,
        domain_id: u32,
        part: String,
        values: Vec<f64>,
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(Error::Csv {
                line: line_no,
                detail: format!("expected {} fields, got {}", dim + 3, fields.len()),
            });
        }
        let parse_u32 = |s: &str, what: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::Csv {
                line: line_no,
                detail: format!("bad {what} `{s}`"),
            })
        };
        let values: Vec<f64> = fields[3..]
            .iter()
            .map(|s| {
                s.parse().map_err(|_| Error::Csv {
                    line: line_no,
                    detail: format!("bad value `{s}`"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(Row {
            client_id: parse_u32(fields[0], "client_id")?,
            domain_id: parse_u32(fields[1], "domain_id")?,
            part: fields[2].to_string(),
            values,
        });
    }
    if rows.len() % 2 != 0 {
        return Err(Error::Csv {
            line: rows.len() + 1,
            detail: "expected an f and an l row per client".into(),
        });
    }

    let mut records = Vec::new();
    for pair in rows.chunks(2) {
        let (f_row, l_row) = (&pair[0], &pair[1]);
        if f_row.part != "f" || l_row.part != "l" || f_row.client_id != l_row.client_id {
            return Err(Error::Csv {
                line: 0,
                detail: format!(
                    "client {} rows must come as an f row followed by an l row",
                    f_row.client_id
                ),
            });
        }
        records.push(IndexRecord {
            client_id: f_row.client_id,
            domain_id: f_row.domain_id,
            index: ClientIndex {
                beta_f: f_row.values.clone(),
                beta_l: l_row.values.clone(),
            },
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn params() -> DsaIgnParams {
        let mut r = rng::stream(100, 0, 0, 0);
        DsaIgnParams::init(6, 4, Some(5), &mut r).unwrap()
    }

    #[test]
    fn params_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dsai");
        let p = params();
        save_index_params(&p, &path).unwrap();
        let loaded = load_index_params(&path).unwrap();
        assert_eq!(loaded, p);
    }

    #[test]
    fn truncated_params_file_reports_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dsai");
        save_index_params(&params(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_index_params(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn index_csv_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("indices.csv");
        let records = vec![
            IndexRecord {
                client_id: 0,
                domain_id: 0,
                index: ClientIndex {
                    beta_f: vec![0.1, -0.25, 1.0 / 3.0],
                    beta_l: vec![1e-17, 2.5, -0.0],
                },
            },
            IndexRecord {
                client_id: 1,
                domain_id: 1,
                index: ClientIndex {
                    beta_f: vec![f64::MIN_POSITIVE, 0.7, -3.25],
                    beta_l: vec![0.125, -0.5, 0.75],
                },
            },
        ];
        write_index_csv(&records, &path).unwrap();
        let loaded = read_index_csv(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.client_id, b.client_id);
            for (x, y) in a.index.beta_f.iter().zip(&b.index.beta_f) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.index.beta_l.iter().zip(&b.index.beta_l) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "client_id,domain_id,part,dim_0\n0,0,f,not_a_number\n").unwrap();
        match read_index_csv(&path) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected csv error, got {other:?}"),
        }
    }
}
