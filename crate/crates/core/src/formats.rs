//! Text and binary file formats.
//!
//! Numbers are written with Rust's shortest round-trip `f64` formatting, so
//! every write -> read -> write cycle is byte-identical. Lines end in LF.
//!
//! ```text
//! mesh <num_nodes> <num_undirected_edges>     series <graph_id> <T> <N> <dt>
//! v <x> <y>                                    <T lines of N values>
//! e <i> <j>
//! ```
//!
//! A model checkpoint is a text header (`meshflow-model 1`, the `model.*`
//! keys, then a `params` line) followed by the binary parameter payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::checkpoint::{read_params, write_params};
use crate::config::{model_config_text, set_model_key, split_assignment};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Graph, SnapshotSeries};
use crate::model::{GraphUNet, ModelConfig};
use crate::train::EpochRecord;

const CHECKPOINT_HEADER: &str = "meshflow-model 1";

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{tok}`")))
}

fn no_trailing<'a>(mut toks: impl Iterator<Item = &'a str>, line: usize) -> Result<()> {
    match toks.next() {
        Some(extra) => Err(Error::parse(line, format!("unexpected token `{extra}`"))),
        None => Ok(()),
    }
}

/// Numbered non-empty lines; CR is rejected so the LF-only contract holds.
fn lines_of<R: BufRead>(r: R) -> impl Iterator<Item = Result<(usize, String)>> {
    r.split(b'\n').enumerate().filter_map(|(i, l)| {
        let l = match l {
            Err(e) => return Some(Err(Error::Io(e))),
            Ok(l) => l,
        };
        if l.ends_with(b"\r") {
            return Some(Err(Error::parse(i + 1, "CR line ending")));
        }
        match String::from_utf8(l) {
            Err(_) => Some(Err(Error::parse(i + 1, "invalid UTF-8"))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
        }
    })
}

pub fn write_mesh<W: Write>(w: &mut W, g: &Graph) -> Result<()> {
    let edges = g.undirected_edges();
    writeln!(w, "mesh {} {}", g.num_nodes(), edges.len())?;
    for c in g.coords() {
        writeln!(w, "v {} {}", c[0], c[1])?;
    }
    for (i, j) in edges {
        writeln!(w, "e {i} {j}")?;
    }
    Ok(())
}

pub fn read_mesh<R: BufRead>(r: R) -> Result<Graph> {
    let mut lines = lines_of(r);
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty mesh file"))??;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("mesh") {
        return Err(Error::parse(hl, "expected `mesh <num_nodes> <num_edges>` header"));
    }
    let n: usize = parse_num(toks.next(), hl, "node count")?;
    let m: usize = parse_num(toks.next(), hl, "edge count")?;
    no_trailing(toks, hl)?;
    let mut coords = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(m);
    let mut last = hl;
    for item in lines {
        let (ln, line) = item?;
        last = ln;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                if !edges.is_empty() {
                    return Err(Error::parse(ln, "vertex after edges"));
                }
                if coords.len() == n {
                    return Err(Error::parse(ln, format!("more than {n} vertices")));
                }
                let x: f64 = parse_num(toks.next(), ln, "x coordinate")?;
                let y: f64 = parse_num(toks.next(), ln, "y coordinate")?;
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::parse(ln, "non-finite coordinate"));
                }
                coords.push([x, y]);
            }
            Some("e") => {
                if edges.len() == m {
                    return Err(Error::parse(ln, format!("more than {m} edges")));
                }
                let i: usize = parse_num(toks.next(), ln, "edge endpoint")?;
                let j: usize = parse_num(toks.next(), ln, "edge endpoint")?;
                if i >= n || j >= n {
                    return Err(Error::parse(ln, format!("edge ({i}, {j}) references a missing node")));
                }
                edges.push((i, j));
            }
            other => {
                return Err(Error::parse(ln, format!("unexpected record `{}`", other.unwrap_or(""))));
            }
        }
        no_trailing(toks, ln)?;
    }
    if coords.len() != n || edges.len() != m {
        return Err(Error::parse(
            last,
            format!("expected {n} vertices and {m} edges, found {} and {}", coords.len(), edges.len()),
        ));
    }
    build_graph(coords, &edges)
}

pub fn write_series<W: Write>(w: &mut W, s: &SnapshotSeries) -> Result<()> {
    if s.graph_id.is_empty() || s.graph_id.contains(char::is_whitespace) {
        return Err(Error::Invalid(format!("graph id `{}` must be a non-empty token", s.graph_id)));
    }
    writeln!(w, "series {} {} {} {}", s.graph_id, s.len(), s.num_nodes(), s.dt)?;
    let mut line = String::new();
    for row in s.fields.rows() {
        line.clear();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_series<R: BufRead>(r: R) -> Result<SnapshotSeries> {
    let mut lines = lines_of(r);
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty series file"))??;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("series") {
        return Err(Error::parse(hl, "expected `series <graph_id> <T> <N> <dt>` header"));
    }
    let id = toks.next().ok_or_else(|| Error::parse(hl, "missing graph id"))?.to_string();
    let t: usize = parse_num(toks.next(), hl, "snapshot count")?;
    let n: usize = parse_num(toks.next(), hl, "node count")?;
    let dt: f64 = parse_num(toks.next(), hl, "dt")?;
    no_trailing(toks, hl)?;
    let mut data = Vec::with_capacity(t * n);
    let mut rows = 0;
    let mut last = hl;
    for item in lines {
        let (ln, line) = item?;
        last = ln;
        if rows == t {
            return Err(Error::parse(ln, format!("more than {t} snapshots")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = parse_num(Some(tok), ln, "value")?;
            data.push(v);
        }
        if data.len() - before != n {
            return Err(Error::parse(ln, format!("expected {n} values, found {}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != t {
        return Err(Error::parse(last, format!("expected {t} snapshots, found {rows}")));
    }
    let fields = Array2::from_shape_vec((t, n), data).expect("counted");
    SnapshotSeries::new(id, dt, fields).map_err(|e| Error::parse(hl, e.to_string()))
}

/// Retained nodes of one pooling level: original indices and coordinates.
pub fn write_pooled_nodes<W: Write>(w: &mut W, level: usize, original: &[usize], g: &Graph) -> Result<()> {
    writeln!(w, "pooled_nodes {level}")?;
    for &i in original {
        let c = g
            .coords()
            .get(i)
            .ok_or(Error::IndexOutOfRange {
                index: i,
                len: g.num_nodes(),
            })?;
        writeln!(w, "{i} {} {}", c[0], c[1])?;
    }
    Ok(())
}

/// One `field <step>` block per predicted snapshot (`values` is `S x N`).
pub fn write_fields<W: Write>(w: &mut W, g: &Graph, values: &Array2<f64>, first_step: usize) -> Result<()> {
    if values.ncols() != g.num_nodes() {
        return Err(Error::shape("write_fields", format!("{} values for {} nodes", values.ncols(), g.num_nodes())));
    }
    for (s, row) in values.rows().into_iter().enumerate() {
        writeln!(w, "field {}", first_step + s)?;
        for (c, v) in g.coords().iter().zip(row.iter()) {
            writeln!(w, "{} {} {v}", c[0], c[1])?;
        }
    }
    Ok(())
}

/// `step,p1..pK` rows from an `S x K` probe trace.
pub fn write_probe_csv<W: Write>(w: &mut W, trace: &Array2<f64>, first_step: usize) -> Result<()> {
    let header: Vec<String> = (1..=trace.ncols()).map(|k| format!("p{k}")).collect();
    writeln!(w, "step,{}", header.join(","))?;
    for (s, row) in trace.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{},{}", first_step + s, vals.join(","))?;
    }
    Ok(())
}

pub fn write_loss_trace<W: Write>(w: &mut W, trace: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,loss,lr,best")?;
    for r in trace {
        writeln!(w, "{},{},{},{}", r.epoch, r.loss, r.lr, r.best)?;
    }
    Ok(())
}

pub fn write_model<W: Write>(w: &mut W, model: &GraphUNet) -> Result<()> {
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    w.write_all(model_config_text(&model.config).as_bytes())?;
    writeln!(w, "params")?;
    write_params(w, &model.store)
}

fn read_header_line<R: Read>(r: &mut R) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Ok(if buf.is_empty() { None } else { Some(String::from_utf8_lossy(&buf).into_owned()) });
        }
        if byte[0] == b'\n' {
            break;
        }
        buf.push(byte[0]);
        if buf.len() > 4096 {
            return Err(Error::Checkpoint("header line too long".into()));
        }
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
}

/// Rebuilds the model from the header and loads the payload; the payload must match the header's architecture.
pub fn read_model<R: Read>(r: &mut R) -> Result<GraphUNet> {
    match read_header_line(r)? {
        Some(l) if l == CHECKPOINT_HEADER => {}
        _ => return Err(Error::Checkpoint(format!("missing `{CHECKPOINT_HEADER}` header"))),
    }
    let mut config = ModelConfig::default();
    let mut line_no = 1;
    loop {
        line_no += 1;
        let line = read_header_line(r)?.ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        if line == "params" {
            break;
        }
        let (k, v) = split_assignment(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let key = k
            .strip_prefix("model.")
            .ok_or_else(|| Error::parse(line_no, format!("unexpected key `{k}`")))?;
        set_model_key(&mut config, key, v).map_err(|e| Error::parse(line_no, e.to_string()))?;
    }
    let mut model = GraphUNet::build(config)?;
    let params = read_params(r)?;
    model.store.load_from(&params)?;
    Ok(model)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_mesh(path: &Path, g: &Graph) -> Result<()> {
    let mut w = create(path)?;
    write_mesh(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<Graph> {
    read_mesh(open(path)?)
}

pub fn save_series(path: &Path, s: &SnapshotSeries) -> Result<()> {
    let mut w = create(path)?;
    write_series(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_series(path: &Path) -> Result<SnapshotSeries> {
    read_series(open(path)?)
}

pub fn save_model(path: &Path, model: &GraphUNet) -> Result<()> {
    let mut w = create(path)?;
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GraphUNet> {
    read_model(&mut open(path)?)
}
