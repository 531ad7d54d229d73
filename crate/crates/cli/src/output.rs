//! On-disk artifacts: diagnostics CSV, field snapshots, sweep tables and
//! the run summary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use eady_core::diagnostics::{convergence_slope, lifecycle};
use eady_core::experiment::SweepPoint;
use eady_core::{DiagnosticRecord, Field, Spaces};

pub const CSV_HEADER: [&str; 9] = ["time_days", "E", "K_u", "K_v", "P", "rmsv", "eta_l2", "max_rv", "eps_cum"];
pub const SWEEP_HEADER: [&str; 3] = ["beta", "dt", "eta_l2"];

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Streams diagnostic records to CSV. Floats are written in the shortest
/// form that parses back to the same value.
pub struct DiagnosticsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut inner = csv::Writer::from_writer(BufWriter::new(file));
        inner.write_record(CSV_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &DiagnosticRecord) -> Result<()> {
        let row = [r.days(), r.e, r.k_u, r.k_v, r.p, r.rmsv, r.eta_l2, r.max_rv, r.eps_cum];
        self.inner.write_record(row.iter().map(|x| x.to_string()))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_diagnostics(path: &Path, records: &[DiagnosticRecord]) -> Result<()> {
    let mut w = DiagnosticsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticRecord>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    ensure!(header == CSV_HEADER, "{}: not a diagnostics CSV (header {header:?})", path.display());
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let x: Vec<f64> = row
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        ensure!(x.len() == CSV_HEADER.len(), "{}: row {} has {} columns", path.display(), i + 1, x.len());
        out.push(DiagnosticRecord {
            time: x[0] * SECONDS_PER_DAY,
            e: x[1],
            k_u: x[2],
            k_v: x[3],
            p: x[4],
            rmsv: x[5],
            eta_l2: x[6],
            max_rv: x[7],
            eps_cum: x[8],
        });
    }
    Ok(out)
}

pub fn write_sweep(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(SWEEP_HEADER)?;
    for p in points {
        w.write_record([p.beta.to_string(), p.dt.to_string(), p.eta_l2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    ensure!(header == SWEEP_HEADER, "{}: not a sweep CSV", path.display());
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| -> Result<f64> { Ok(row.get(i).context("short row")?.parse()?) };
        out.push(SweepPoint { beta: f(0)?, dt: f(1)?, eta_l2: f(2)? });
    }
    Ok(out)
}

/// Which kind of CSV a file holds, judged by its header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvKind {
    Diagnostics,
    Sweep,
}

pub fn csv_kind(path: &Path) -> Result<CsvKind> {
    let mut first = String::new();
    BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?).read_line(&mut first)?;
    let cols: Vec<&str> = first.trim_end().split(',').collect();
    if cols == CSV_HEADER {
        Ok(CsvKind::Diagnostics)
    } else if cols == SWEEP_HEADER {
        Ok(CsvKind::Sweep)
    } else {
        bail!("{}: unrecognised header {:?}", path.display(), first.trim_end())
    }
}

/// A field sampled on the uniform evaluation lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub field: String,
    pub units: String,
    pub time_days: f64,
    pub nx: usize,
    pub nz: usize,
    /// `(x, z, value)`, x-major.
    pub rows: Vec<[f64; 3]>,
}

/// Samples `field` at the centres of a `4nx × 4nz` lattice of equal
/// rectangles, x-major (x outer, z inner). Centres avoid cell edges where
/// discontinuous fields are two-valued.
pub fn sample_lattice(spaces: &Spaces, field: &Field) -> Vec<[f64; 3]> {
    let m = &spaces.mesh;
    let (sx, sz) = (4 * m.nx(), 4 * m.nz());
    let hx = 2.0 * m.half_width() / sx as f64;
    let hz = m.height() / sz as f64;
    let mut rows = Vec::with_capacity(sx * sz);
    for i in 0..sx {
        let x = -m.half_width() + (i as f64 + 0.5) * hx;
        for j in 0..sz {
            let z = (j as f64 + 0.5) * hz;
            rows.push([x, z, spaces.evaluate(field, x, z)[0]]);
        }
    }
    rows
}

pub fn snapshot(spaces: &Spaces, field: &Field, name: &str, units: &str, time_days: f64) -> Snapshot {
    Snapshot {
        field: name.to_string(),
        units: units.to_string(),
        time_days,
        nx: 4 * spaces.mesh.nx(),
        nz: 4 * spaces.mesh.nz(),
        rows: sample_lattice(spaces, field),
    }
}

impl Snapshot {
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 48 + 128);
        let _ = writeln!(s, "# field {}", self.field);
        let _ = writeln!(s, "# time_days {}", self.time_days);
        let _ = writeln!(s, "# grid {} {}", self.nx, self.nz);
        let _ = writeln!(s, "# units x m, z m, value {}", self.units);
        s.push_str("x z value\n");
        for [x, z, v] in &self.rows {
            let _ = writeln!(s, "{x} {z} {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        w.write_all(self.render().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut snap = Snapshot { field: String::new(), units: String::new(), time_days: f64::NAN, nx: 0, nz: 0, rows: Vec::new() };
        let mut table = false;
        for (n, line) in text.lines().enumerate() {
            let ctx = || format!("snapshot line {}", n + 1);
            if let Some(h) = line.strip_prefix("# ") {
                let (key, rest) = h.split_once(' ').with_context(ctx)?;
                match key {
                    "field" => snap.field = rest.to_string(),
                    "time_days" => snap.time_days = rest.parse().with_context(ctx)?,
                    "grid" => {
                        let (a, b) = rest.split_once(' ').with_context(ctx)?;
                        snap.nx = a.parse().with_context(ctx)?;
                        snap.nz = b.parse().with_context(ctx)?;
                    }
                    "units" => snap.units = rest.rsplit_once("value ").map(|(_, u)| u.to_string()).unwrap_or_default(),
                    _ => bail!("{}: unknown header {key:?}", ctx()),
                }
            } else if line == "x z value" {
                table = true;
            } else if table {
                let vals: Vec<f64> = line.split(' ').map(str::parse).collect::<std::result::Result<_, _>>().with_context(ctx)?;
                ensure!(vals.len() == 3, "{}: expected 3 columns", ctx());
                snap.rows.push([vals[0], vals[1], vals[2]]);
            } else {
                bail!("{}: unexpected line before table", ctx());
            }
        }
        ensure!(snap.rows.len() == snap.nx * snap.nz, "snapshot has {} rows for a {}×{} grid", snap.rows.len(), snap.nx, snap.nz);
        Ok(snap)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

/// File name for a snapshot of `field` at `day`, e.g. `v_day7.txt`.
pub fn snapshot_name(field: &str, day: f64) -> String {
    format!("{field}_day{day}.txt")
}

/// Headline numbers of a diagnostics series.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub records: usize,
    pub end_day: f64,
    /// `(day, value)` of the RMSV peak.
    pub peak: Option<(f64, f64)>,
    pub first_minimum: Option<(f64, f64)>,
    /// `E(0) − E(end)`.
    pub energy_loss: f64,
    /// The loss as a percentage of the peak |K_v − K_v(0)|.
    pub energy_loss_pct_kv: f64,
    pub eps_cum: f64,
    pub max_eta: f64,
    pub max_rv: f64,
}

/// Window for the lifecycle peak and minimum, in days.
pub const LIFECYCLE_WINDOW: f64 = 1.0;

impl Summary {
    pub fn of(records: &[DiagnosticRecord]) -> Self {
        let first = records.first().copied().unwrap_or_default();
        let last = records.last().copied().unwrap_or_default();
        let series: Vec<(f64, f64)> = records.iter().map(|r| (r.days(), r.rmsv)).collect();
        let life = lifecycle(&series, LIFECYCLE_WINDOW);
        let kv_swing = records.iter().map(|r| (r.k_v - first.k_v).abs()).fold(0.0, f64::max);
        let energy_loss = first.e - last.e;
        Summary {
            records: records.len(),
            end_day: last.days(),
            peak: life.map(|l| l.peak),
            first_minimum: life.and_then(|l| l.minimum),
            energy_loss,
            energy_loss_pct_kv: if kv_swing > 0.0 { 100.0 * energy_loss / kv_swing } else { 0.0 },
            eps_cum: last.eps_cum,
            max_eta: records.iter().map(|r| r.eta_l2).fold(0.0, f64::max),
            max_rv: records.iter().map(|r| r.max_rv).fold(0.0, f64::max),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let day_val = |p: Option<(f64, f64)>| p.map_or("none".to_string(), |(d, v)| format!("day {d:.3} value {v:.6e}"));
        let _ = writeln!(s, "records {} through day {:.3}", self.records, self.end_day);
        let _ = writeln!(s, "rmsv peak: {}", day_val(self.peak));
        let _ = writeln!(s, "rmsv first minimum: {}", day_val(self.first_minimum));
        let _ = writeln!(s, "total energy loss: {:.6e} J m^-1 ({:.3}% of peak |K_v - K_v(0)|)", self.energy_loss, self.energy_loss_pct_kv);
        let _ = writeln!(s, "cumulative dissipation eps: {:.6e} J m^-1", self.eps_cum);
        let _ = writeln!(s, "max eta_l2: {:.6e}", self.max_eta);
        let _ = writeln!(s, "max r_v: {:.6e}", self.max_rv);
        s
    }
}

/// Slope of log η against log β, with the points it came from.
pub fn render_sweep(points: &[SweepPoint]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "beta {:.6} dt {} eta_l2 {:.6e}", p.beta, p.dt, p.eta_l2);
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.beta, p.eta_l2)).collect();
    match convergence_slope(&pairs) {
        Ok(m) => {
            let _ = writeln!(s, "convergence slope: {m:.4}");
        }
        Err(e) => {
            let _ = writeln!(s, "convergence slope: unavailable ({e})");
        }
    }
    s
}

/// Rows for the t = 0 balance line of the summary.
pub fn render_balance(b: &eady_core::experiment::InitialBalance) -> String {
    format!(
        "initial max|v| {:.6e} eta_l2 {:.6e} (ratio {:.3e}) max|div u| {:.3e} div_l2 {:.3e}\n",
        b.max_v,
        b.eta_l2,
        b.eta_l2 / b.max_v,
        b.max_divergence,
        b.divergence_l2
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use eady_core::SpaceId;

    fn spaces() -> Spaces {
        Spaces::new(eady_core::Mesh::new(3, 2, 1.0e6, 1.0e4).unwrap(), 2).unwrap()
    }

    fn rec(t: f64) -> DiagnosticRecord {
        DiagnosticRecord { time: t * SECONDS_PER_DAY, e: 1.0 / 3.0, k_u: 1e10, k_v: -2.5e-7, p: 0.1, rmsv: t.sin(), eta_l2: 1e-300, max_rv: 0.0, eps_cum: 7.0 }
    }

    #[test]
    fn zero_field_samples_zero() {
        let sp = spaces();
        let rows = sample_lattice(&sp, &sp.zeros(SpaceId::V2));
        assert_eq!(rows.len(), 12 * 8);
        assert!(rows.iter().all(|r| r[2] == 0.0));
    }

    #[test]
    fn constant_field_samples_constant() {
        let sp = spaces();
        for id in [SpaceId::V2, SpaceId::Vb] {
            let f = sp.interpolate(id, |_, _| [3.25, 0.0]);
            for r in sample_lattice(&sp, &f) {
                assert!((r[2] - 3.25).abs() < 1e-13, "{id:?} {r:?}");
            }
        }
    }

    #[test]
    fn lattice_is_x_major() {
        let sp = spaces();
        let rows = sample_lattice(&sp, &sp.zeros(SpaceId::V2));
        assert_eq!(rows[0][0], rows[1][0]);
        assert!(rows[1][1] > rows[0][1]);
        assert!(rows[8][0] > rows[0][0]);
        assert!(rows.iter().all(|r| r[0].abs() < 1.0e6 && r[1] > 0.0 && r[1] < 1.0e4));
    }

    #[test]
    fn snapshot_round_trips_bitwise() {
        let sp = spaces();
        let f = sp.interpolate(SpaceId::Vb, |x, z| [(x / 3.0e5).sin() * z / 7.0, 0.0]);
        let s = snapshot(&sp, &f, "b", "m s^-2", 11.0 / 3.0);
        let back = Snapshot::parse(&s.render()).unwrap();
        assert_eq!(back, s);
        let again = sample_lattice(&sp, &f);
        for (a, b) in back.rows.iter().zip(&again) {
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }

    #[test]
    fn truncated_snapshot_rejected() {
        let sp = spaces();
        let text = snapshot(&sp, &sp.zeros(SpaceId::V2), "v", "m s^-1", 0.0).render();
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(Snapshot::parse(&cut).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let recs: Vec<_> = (0..5).map(|i| rec(i as f64 * 0.37)).collect();
        write_diagnostics(&path, &recs).unwrap();
        let back = read_diagnostics(&path).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.e.to_bits(), b.e.to_bits());
            assert_eq!(a.days().to_bits(), b.days().to_bits());
            assert_eq!(a.eta_l2, b.eta_l2);
        }
        assert_eq!(csv_kind(&path).unwrap(), CsvKind::Diagnostics);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("time_days,E,K_u,K_v,P,rmsv,eta_l2,max_rv,eps_cum\n"));
    }

    #[test]
    fn header_only_csv_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_diagnostics(&path, &[]).unwrap();
        assert!(read_diagnostics(&path).unwrap().is_empty());
        assert_eq!(Summary::of(&[]).records, 0);
    }

    #[test]
    fn sweep_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let pts: Vec<_> = [1.0, 0.5, 0.25].iter().map(|&b| SweepPoint { beta: b, dt: 50.0, eta_l2: 3.0 * b * b }).collect();
        write_sweep(&path, &pts).unwrap();
        assert_eq!(read_sweep(&path).unwrap(), pts);
        assert_eq!(csv_kind(&path).unwrap(), CsvKind::Sweep);
        assert!(render_sweep(&pts).contains("convergence slope: 2.0000"));
    }

    #[test]
    fn summary_finds_lifecycle() {
        let recs: Vec<_> = (0..=300)
            .map(|i| {
                let t = i as f64 * 0.05;
                DiagnosticRecord { time: t * SECONDS_PER_DAY, rmsv: (-(t - 7.0).powi(2) / 4.0).exp() + 0.5 * (-(t - 14.0).powi(2)).exp(), ..Default::default() }
            })
            .collect();
        let s = Summary::of(&recs);
        let (pd, _) = s.peak.unwrap();
        assert!((pd - 7.0).abs() < 1e-9);
        let (md, _) = s.first_minimum.unwrap();
        assert!(md > 7.0 && md < 14.0);
    }
}
