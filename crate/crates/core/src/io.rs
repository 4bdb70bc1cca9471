//! File formats.
//!
//! Bath file: UTF-8 text, one spin per line,
//!
//! ```text
//! isotope x y z [Axx Axy Axz Ayx Ayy Ayz Azx Azy Azz] [Q Qxx … Qzz]
//! ```
//!
//! positions in nm, tensors in MHz, `#` starts a comment. A lone `-` in
//! place of the nine hyperfine components means "no hyperfine tensor"; a
//! quadrupole tensor follows the literal `Q`.
//!
//! Density file: Gaussian cube layout. Two title lines; `natoms ox oy oz`;
//! three lines `n_i vx vy vz` (grid steps; `n_i > 0` means bohr, `n_i < 0`
//! means ångström); `natoms` atom lines `Z charge x y z`; then
//! `n1·n2·n3` values with the last axis fastest. Values are spin density per
//! cubic length unit of the header and are converted to nm⁻³.
//!
//! Trace CSV: `# key: value` metadata lines, then `t_ms,re_L,im_L,abs_L`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::bath::{BathConfiguration, BathSpin};
use crate::couplings::{InteractionTensor, SpinDensityGrid};
use crate::error::{Error, Result};
use crate::propagation::CoherenceTrace;
use crate::C64;

pub const BOHR_NM: f64 = 0.052_917_721_09;
const ANGSTROM_NM: f64 = 0.1;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_f64(path: &Path, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a number, found '{tok}'")))
}

fn parse_tensor(path: &Path, line: usize, toks: &[&str]) -> Result<InteractionTensor<f64>> {
    let mut v = [0.0; 9];
    for (slot, tok) in v.iter_mut().zip(toks) {
        *slot = parse_f64(path, line, tok)?;
    }
    InteractionTensor::new(Matrix3::from_row_slice(&v)).map_err(|e| parse_err(path, line, e.to_string()))
}

pub fn parse_bath(text: &str, path: &Path) -> Result<BathConfiguration> {
    let mut spins = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(parse_err(path, line, "expected 'isotope x y z'"));
        }
        let pos = Vector3::new(
            parse_f64(path, line, toks[1])?,
            parse_f64(path, line, toks[2])?,
            parse_f64(path, line, toks[3])?,
        );
        let mut spin = BathSpin::new(toks[0], pos).map_err(|e| parse_err(path, line, e.to_string()))?;
        let mut rest = &toks[4..];
        if rest.first() == Some(&"-") {
            rest = &rest[1..];
        } else if !rest.is_empty() && rest[0] != "Q" {
            if rest.len() < 9 {
                return Err(parse_err(path, line, format!("hyperfine tensor needs 9 components, found {}", rest.len())));
            }
            spin.hyperfine = Some(parse_tensor(path, line, &rest[..9])?);
            rest = &rest[9..];
        }
        if !rest.is_empty() {
            if rest[0] != "Q" || rest.len() != 10 {
                return Err(parse_err(path, line, "trailing fields; expected 'Q' and 9 quadrupole components"));
            }
            spin.quadrupole = Some(parse_tensor(path, line, &rest[1..])?);
        }
        spin.validate().map_err(|e| parse_err(path, line, e.to_string()))?;
        spins.push(spin);
    }
    BathConfiguration::from_spins(spins)
}

pub fn load_bath(path: &Path) -> Result<BathConfiguration> {
    let text = fs::read_to_string(path)?;
    parse_bath(&text, path)
}

fn push_tensor(out: &mut String, t: &InteractionTensor<f64>) {
    for a in 0..3 {
        for b in 0..3 {
            out.push_str(&format!(" {:?}", t.get(a, b)));
        }
    }
}

pub fn format_bath(config: &BathConfiguration) -> String {
    let mut out = String::new();
    for s in &config.spins {
        out.push_str(&format!("{} {:?} {:?} {:?}", s.isotope, s.position.x, s.position.y, s.position.z));
        match (&s.hyperfine, &s.quadrupole) {
            (Some(a), _) => push_tensor(&mut out, a),
            (None, Some(_)) => out.push_str(" -"),
            (None, None) => {}
        }
        if let Some(q) = &s.quadrupole {
            out.push_str(" Q");
            push_tensor(&mut out, q);
        }
        out.push('\n');
    }
    out
}

pub fn save_bath(config: &BathConfiguration, path: &Path) -> Result<()> {
    let mut text = String::new();
    if config.seed != 0 || config.abundance != 0.0 {
        text.push_str(&format!("# seed {} abundance {:?}\n", config.seed, config.abundance));
    }
    text.push_str(&format_bath(config));
    fs::write(path, text)?;
    Ok(())
}

/// Reads a cube file; `normalization` is the declared integral of the
/// density (2 for an S = 1 defect).
pub fn load_cube(path: &Path, normalization: f64) -> Result<SpinDensityGrid> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let nums = |idx: usize, min: usize| -> Result<Vec<f64>> {
        let l = lines.get(idx).ok_or_else(|| parse_err(path, idx + 1, "unexpected end of file"))?;
        let v = l.split_whitespace().map(|t| parse_f64(path, idx + 1, t)).collect::<Result<Vec<_>>>()?;
        if v.len() < min {
            return Err(parse_err(path, idx + 1, format!("expected at least {min} fields")));
        }
        Ok(v)
    };
    let head = nums(2, 4)?;
    let natoms = head[0].abs() as usize;
    let mut counts = [0usize; 3];
    let mut axes = Matrix3::zeros();
    let mut unit = BOHR_NM;
    for d in 0..3 {
        let row = nums(3 + d, 4)?;
        if row[0] == 0.0 || row[0].fract() != 0.0 {
            return Err(parse_err(path, 4 + d, "grid count must be a non-zero integer"));
        }
        if row[0] < 0.0 {
            unit = ANGSTROM_NM;
        }
        counts[d] = row[0].abs() as usize;
        for k in 0..3 {
            axes[(k, d)] = row[1 + k];
        }
    }
    axes *= unit;
    let origin = Vector3::new(head[1], head[2], head[3]) * unit;
    let first = 6 + natoms;
    let n = counts.iter().product::<usize>();
    let mut values = Vec::with_capacity(n);
    for (idx, l) in lines.iter().enumerate().skip(first) {
        for tok in l.split_whitespace() {
            values.push(parse_f64(path, idx + 1, tok)? / unit.powi(3));
        }
    }
    if values.len() != n {
        return Err(parse_err(path, lines.len(), format!("expected {n} density values, found {}", values.len())));
    }
    SpinDensityGrid::new(origin, axes, counts, values, normalization)
}

/// Writes a grid in cube layout with bohr units.
pub fn save_cube(grid: &SpinDensityGrid, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "spin density")?;
    writeln!(w, "normalization {:?}", grid.normalization)?;
    let o = grid.origin / BOHR_NM;
    writeln!(w, "0 {:?} {:?} {:?}", o.x, o.y, o.z)?;
    for d in 0..3 {
        let a = grid.axes.column(d) / BOHR_NM;
        writeln!(w, "{} {:?} {:?} {:?}", grid.counts[d], a.x, a.y, a.z)?;
    }
    let scale = BOHR_NM.powi(3);
    for chunk in grid.values.chunks(6) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{:?}", v * scale)).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(trace: &CoherenceTrace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_trace_to(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace_to<W: Write>(trace: &CoherenceTrace, w: &mut W) -> Result<()> {
    for (k, v) in &trace.metadata {
        writeln!(w, "# {k}: {v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["t_ms", "re_L", "im_L", "abs_L"]).map_err(csv_err)?;
    for (t, l) in trace.times.iter().zip(&trace.values) {
        csv.serialize((t, l.re, l.im, l.norm())).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<CoherenceTrace> {
    let text = fs::read_to_string(path)?;
    let mut metadata = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                metadata.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column '{name}'")))
    };
    let (ct, cr, ci) = (col("t_ms")?, col("re_L")?, col("im_L")?);
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(n + 2, |p| p.line() as usize);
        let get = |c: usize| parse_f64(path, line, rec.get(c).unwrap_or("").trim());
        times.push(get(ct)?);
        values.push(C64::new(get(cr)?, get(ci)?));
    }
    CoherenceTrace::new(times, values).map(|t| t.with_metadata_map(metadata))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}

/// Plot-ready table: header row (or a `#`-prefixed header line when
/// `gnuplot` is set) followed by rows.
pub fn write_table<W: Write>(w: &mut W, headers: &[&str], rows: &[Vec<String>], gnuplot: bool) -> Result<()> {
    if gnuplot {
        writeln!(w, "# {}", headers.join(" "))?;
        for r in rows {
            writeln!(w, "{}", r.join(" "))?;
        }
        return Ok(());
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(headers).map_err(csv_err)?;
    for r in rows {
        csv.write_record(r).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, headers: &[&str], rows: &[Vec<String>], gnuplot: bool) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_table(&mut w, headers, rows, gnuplot)?;
    w.flush()?;
    Ok(())
}
