//! Summary tables and SVG figures built from experiment CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cl_lab_core::stats::median;
use plotters::prelude::*;

use crate::error::{CliError, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(0, 0, 0),
];

/// A CSV file loaded as text records with a column index.
pub struct Table {
    cols: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn load(path: &Path) -> std::result::Result<Table, String> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cols = rdr
            .headers()
            .map_err(|e| format!("{}: {e}", path.display()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Table { cols, rows })
    }

    fn col(&self, name: &str) -> std::result::Result<usize, String> {
        self.cols
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| format!("missing column {name:?}"))
    }

    /// Text column.
    pub fn text(&self, name: &str) -> std::result::Result<Vec<String>, String> {
        let k = self.col(name)?;
        Ok(self.rows.iter().map(|r| r.get(k).unwrap_or("").to_string()).collect())
    }

    /// Numeric column; unparsable cells become NaN.
    pub fn num(&self, name: &str) -> std::result::Result<Vec<f64>, String> {
        Ok(self
            .text(name)?
            .iter()
            .map(|s| s.parse::<f64>().unwrap_or(f64::NAN))
            .collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

type Series = (String, Vec<(f64, f64)>);

fn finite_range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    Some((lo - pad, hi + pad))
}

/// Line (or scatter) plot of several series; non-finite points are dropped.
pub fn plot_series(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series],
    scatter: bool,
) -> Result<()> {
    let pe = |e: &dyn std::fmt::Display| CliError::Plot(format!("{}: {e}", path.display()));
    let clean: Vec<Series> = series
        .iter()
        .map(|(n, p)| (n.clone(), p.iter().cloned().filter(|(x, y)| x.is_finite() && y.is_finite()).collect()))
        .collect();
    let all = || clean.iter().flat_map(|(_, p)| p.iter());
    let (Some(xr), Some(yr)) = (finite_range(all().map(|p| p.0)), finite_range(all().map(|p| p.1))) else {
        return Err(CliError::Plot(format!("{}: no finite points", path.display())));
    };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| pe(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(|e| pe(&e))?;
    chart
        .configure_mesh()
        .x_desc(xlabel)
        .y_desc(ylabel)
        .draw()
        .map_err(|e| pe(&e))?;
    for (i, (name, pts)) in clean.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if scatter {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| pe(&e))?
                .label(name.as_str())
                .legend(move |(x, y)| Circle::new((x, y), 3, color.filled()));
        } else {
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| pe(&e))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| pe(&e))?;
    root.present().map_err(|e| pe(&e))?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct ReportOutcome {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

type Section = std::result::Result<(), String>;

struct Builder<'a> {
    dir: &'a Path,
    md: String,
    out: ReportOutcome,
}

impl Builder<'_> {
    fn table(&self, name: &str) -> std::result::Result<Table, String> {
        let p = self.dir.join(name);
        if !p.is_file() {
            return Err(format!("{name} not found"));
        }
        let t = Table::load(&p)?;
        if t.is_empty() {
            return Err(format!("{name} has no rows"));
        }
        Ok(t)
    }

    fn plot(&mut self, file: &str, title: &str, x: &str, y: &str, s: &[Series], scatter: bool) -> Section {
        let p = self.dir.join(file);
        plot_series(&p, title, x, y, s, scatter).map_err(|e| e.to_string())?;
        let _ = writeln!(self.md, "\n![{title}]({file})\n");
        self.out.written.push(p);
        Ok(())
    }

    fn run(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Section) {
        if let Err(e) = f(self) {
            let msg = format!("{name}: {e}");
            let _ = writeln!(self.md, "\n_Skipped: {msg}_\n");
            self.out.warnings.push(msg);
        }
    }
}

/// Group `values` by `key` and take medians.
fn group_median<K: Ord + Clone>(keys: &[K], values: &[f64]) -> BTreeMap<K, f64> {
    let mut g: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (k, v) in keys.iter().zip(values) {
        if v.is_finite() {
            g.entry(k.clone()).or_default().push(*v);
        }
    }
    g.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

fn group_mean<K: Ord + Clone>(keys: &[K], values: &[f64]) -> BTreeMap<K, f64> {
    let mut g: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in keys.iter().zip(values) {
        if v.is_finite() {
            let e = g.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    g.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn as_usize(v: &[f64]) -> Vec<usize> {
    v.iter().map(|x| if x.is_finite() { *x as usize } else { 0 }).collect()
}

fn phase_section(b: &mut Builder) -> Section {
    let t = b.table("phase.csv")?;
    let ls = as_usize(&t.num("L")?);
    let rs = as_usize(&t.num("rank")?);
    let keys: Vec<(usize, usize)> = ls.iter().cloned().zip(rs.iter().cloned()).collect();
    let med = group_median(&keys, &t.num("alpha")?);
    let _ = writeln!(b.md, "## Alignment vs rank\n\n| L | rank | median alpha |\n|---|---|---|");
    for ((l, r), a) in &med {
        let _ = writeln!(b.md, "| {l} | {r} | {a:.4} |");
    }
    let mut series: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for ((l, r), a) in &med {
        series.entry(*l).or_default().push(((*r as f64).log10(), a.log10()));
    }
    let s: Vec<Series> = series.into_iter().map(|(l, p)| (format!("L={l}"), p)).collect();
    b.plot("phase_transition.svg", "Median alignment vs target rank", "log10 rank", "log10 alpha", &s, false)
}

fn bounds_section(b: &mut Builder, file: &str, svg: &str) -> Section {
    let t = b.table(file)?;
    let ok: Vec<bool> = t.text("regime_ok")?.iter().map(|s| s == "true").collect();
    let alpha = t.num("alpha_measured")?;
    let tight = t.num("bound_tight")?;
    let interp = t.num("bound_interp")?;
    let n_ok = ok.iter().filter(|o| **o).count();
    let above = |bound: &[f64]| (0..t.len()).filter(|&k| ok[k] && alpha[k] >= bound[k]).count();
    let _ = writeln!(
        b.md,
        "## Bounds ({file})\n\n| rows | regime_ok | alpha >= tighter | alpha >= interpretable |\n|---|---|---|---|\n| {} | {n_ok} | {} | {} |",
        t.len(),
        above(&tight),
        above(&interp)
    );
    let pts = |bound: &[f64]| -> Vec<(f64, f64)> {
        (0..t.len()).filter(|&k| ok[k]).map(|k| (bound[k].log10(), alpha[k].log10())).collect()
    };
    let (tp, ip) = (pts(&tight), pts(&interp));
    let lo = tp.iter().chain(&ip).map(|p| p.0.min(p.1)).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = tp.iter().chain(&ip).map(|p| p.0.max(p.1)).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let mut s = vec![("tighter".to_string(), tp), ("interpretable".to_string(), ip)];
    if lo.is_finite() && hi.is_finite() {
        s.push(("alpha = bound".to_string(), vec![(lo, lo), (hi, hi)]));
    }
    b.plot(svg, "Measured alignment vs lower bounds (regime_ok rows)", "log10 bound", "log10 alpha", &s, true)
}

fn forgetting_section(b: &mut Builder) -> Section {
    let t = b.table("forgetting.csv")?;
    let ls = as_usize(&t.num("L")?);
    let rs = as_usize(&t.num("rank")?);
    let steps = as_usize(&t.num("step")?);
    let (l0, r0) = (ls[0], rs[0]);
    let keep: Vec<usize> = (0..t.len()).filter(|&k| ls[k] == l0 && rs[k] == r0).collect();
    let k_steps: Vec<usize> = keep.iter().map(|&k| steps[k]).collect();
    let mut s = Vec::new();
    for (col, label) in [("actual", "actual"), ("second", "second order"), ("random_mean", "random perturbation")] {
        let v = t.num(col)?;
        let vals: Vec<f64> = keep.iter().map(|&k| v[k]).collect();
        let m = group_mean(&k_steps, &vals);
        s.push((label.to_string(), m.into_iter().map(|(x, y)| (x as f64, y)).collect::<Vec<_>>()));
    }
    let last = s[0].1.last().map(|p| p.1).unwrap_or(f64::NAN);
    let last_rand = s[2].1.last().map(|p| p.1).unwrap_or(f64::NAN);
    let _ = writeln!(
        b.md,
        "## Forgetting (L={l0}, rank={r0})\n\nFinal mean actual forgetting {last:.4e}; random perturbation at matched norm {last_rand:.4e}."
    );
    b.plot("forgetting.svg", &format!("Old-task forgetting, L={l0}, rank={r0}"), "new-task step", "loss increase", &s, false)
}

fn cl_section(b: &mut Builder) -> Section {
    let t = b.table("cl_summary.csv")?;
    let modes = t.text("mode")?;
    let mut order: Vec<String> = Vec::new();
    for m in &modes {
        if !order.contains(m) {
            order.push(m.clone());
        }
    }
    let _ = writeln!(
        b.md,
        "## Continual learning\n\n| mode | median alpha | median forgetting | ACC | BWT | immACC |\n|---|---|---|---|---|---|"
    );
    let cols: Vec<Vec<f64>> = ["mean_task_alpha", "mean_forgetting", "ACC", "BWT", "immACC"]
        .iter()
        .map(|c| t.num(c))
        .collect::<std::result::Result<_, _>>()?;
    for m in &order {
        let med: Vec<f64> = cols
            .iter()
            .map(|c| median(&(0..t.len()).filter(|&k| &modes[k] == m).map(|k| c[k]).collect::<Vec<_>>()))
            .collect();
        let _ = writeln!(
            b.md,
            "| {m} | {:.4} | {:.4e} | {:.4} | {:.4} | {:.4} |",
            med[0], med[1], med[2], med[3], med[4]
        );
    }
    let steps = b.table("cl.csv")?;
    let smode = steps.text("mode")?;
    let task = as_usize(&steps.num("task")?);
    let step = as_usize(&steps.num("step")?);
    let alpha = steps.num("alpha")?;
    let mut s = Vec::new();
    for m in &order {
        let idx: Vec<usize> = (0..steps.len()).filter(|&k| &smode[k] == m && task[k] == 2 && step[k] > 0).collect();
        let keys: Vec<usize> = idx.iter().map(|&k| step[k]).collect();
        let vals: Vec<f64> = idx.iter().map(|&k| alpha[k].log10()).collect();
        s.push((m.clone(), group_median(&keys, &vals).into_iter().map(|(x, y)| (x as f64, y)).collect()));
    }
    b.plot("cl_alpha.svg", "Alignment while training task 2", "step", "log10 median alpha", &s, false)
}

fn cdf_section(b: &mut Builder) -> Section {
    let mass = b.table("cdf_mass.csv")?;
    let vec = mass.text("vector")?;
    let method = mass.text("method")?;
    let keys: Vec<(String, String)> = vec.iter().cloned().zip(method.iter().cloned()).collect();
    let mm = group_median(&keys, &mass.num("mass_top")?);
    let sup = group_median(&keys, &mass.num("sup_diff")?);
    let _ = writeln!(b.md, "## Projection CDF\n\n| vector | method | median top-region mass | median sup diff |\n|---|---|---|---|");
    for (k, v) in &mm {
        let _ = writeln!(b.md, "| {} | {} | {v:.4} | {:.2e} |", k.0, k.1, sup.get(k).cloned().unwrap_or(f64::NAN));
    }
    let t = b.table("cdf.csv")?;
    let seeds = t.text("seed")?;
    let first = seeds[0].clone();
    let (tv, cv) = (t.num("t")?, t.num("cdf")?);
    let (vv, mv) = (t.text("vector")?, t.text("method")?);
    let mut s: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for k in (0..t.len()).filter(|&k| seeds[k] == first) {
        s.entry(format!("{} ({})", vv[k], mv[k])).or_default().push((tv[k], cv[k]));
    }
    let s: Vec<Series> = s.into_iter().collect();
    b.plot("cdf.svg", "Projection CDF against old-task Hessian", "eigenvalue", "CDF", &s, false)
}

fn power_section(b: &mut Builder) -> Section {
    let t = b.table("power.csv")?;
    let ls = as_usize(&t.num("L")?);
    let steps = as_usize(&t.num("step")?);
    let alpha = t.num("alpha")?;
    let keys: Vec<(usize, usize)> = ls.iter().cloned().zip(steps.iter().cloned()).collect();
    let med = group_median(&keys, &alpha);
    let mut s: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for ((l, st), a) in med {
        s.entry(l).or_default().push((st as f64, a));
    }
    let _ = writeln!(b.md, "## Power iteration\n");
    let s: Vec<Series> = s.into_iter().map(|(l, p)| (format!("L={l}"), p)).collect();
    b.plot("power.svg", "Alignment of the cumulative GD update", "step", "median alpha", &s, false)
}

/// Build `report.md` and SVG figures in `dir` from whatever CSVs exist.
/// Missing or malformed inputs become warnings, not errors.
pub fn cmd_report(dir: &Path) -> Result<ReportOutcome> {
    if !dir.is_dir() {
        return Err(CliError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory not found")));
    }
    let mut b = Builder { dir, md: String::from("# cl-lab report\n"), out: ReportOutcome::default() };
    b.run("phase", phase_section);
    b.run("phase bounds", |b| bounds_section(b, "phase_bounds.csv", "phase_bounds.svg"));
    b.run("bounds", |b| bounds_section(b, "bounds.csv", "bounds.svg"));
    b.run("forgetting", forgetting_section);
    b.run("cl", cl_section);
    b.run("cdf", cdf_section);
    b.run("power", power_section);
    let path = dir.join("report.md");
    std::fs::write(&path, &b.md).map_err(|e| CliError::io(&path, e))?;
    b.out.written.push(path);
    Ok(b.out)
}
