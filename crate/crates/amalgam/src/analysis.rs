//! Report generation: attention-development grids, query-similarity curves
//! and the ablation results table.
//!
//! Everything here is a pure function of files a training run left behind
//! (`run.json`, `metrics.jsonl`, `ck_*.bin`, `results.json`): re-running a
//! report produces identical CSVs and identically drawn images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use plotters::prelude::*;

use crate::checkpoint::load_checkpoint;
use crate::config::{RunConfig, VariantKind};
use crate::metrics::{read_metrics, RolloutTrace, TrainRecord};
use crate::model::build_model;
use crate::train::{rollout, AblationResults, RolloutMode};
use crate::{Error, Result};

/// Timesteps shown in the attention grid when none are requested: one frame
/// every 30 steps.
pub const DEFAULT_TIMESTEPS: [usize; 4] = [0, 30, 60, 90];

/// Nearest-neighbour upscale factor for camera frames in grid cells.
const UPSCALE: usize = 2;
/// Pixels between the frame panel and the heatmap panel of one cell.
const PANEL_GAP: usize = 2;
/// Pixels between grid cells.
const CELL_GAP: usize = 4;
/// Outer margin of the grid image.
const MARGIN: usize = 8;

/// Per-head circle colors (TD points). Heads beyond the palette wrap.
const HEAD_COLORS: [[u8; 3]; 6] = [
    [235, 49, 49],
    [49, 217, 49],
    [64, 140, 255],
    [235, 49, 235],
    [245, 158, 24],
    [49, 217, 217],
];

/// Read the `run.json` a training run wrote into its output directory.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join("run.json");
    let run: RunConfig = serde_json::from_slice(&std::fs::read(&path).map_err(|e| {
        Error::Analysis(format!("{}: {e} (is this a training output directory?)", path.display()))
    })?)?;
    run.validate()?;
    Ok(run)
}

/// Map a normalized point to the draw position in an upscaled frame panel.
/// Normalized coordinates use the pixel-center convention, so `x` lands on
/// pixel column `x * image - 0.5` before upscaling.
pub fn point_to_panel_px(pt: [f64; 2], image: usize, upscale: usize) -> (f64, f64) {
    let u = upscale as f64;
    (
        (pt[0] * image as f64 - 0.5) * u + (u - 1.0) / 2.0,
        (pt[1] * image as f64 - 0.5) * u + (u - 1.0) / 2.0,
    )
}

/// A dark-blue-to-yellow ramp for saliency panels.
fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = 255.0 * (1.5 * t - 0.25).clamp(0.0, 1.0);
    let g = 255.0 * (1.4 * t * t);
    let b = 255.0 * (0.3 + 0.5 * (1.0 - t) - 0.3 * t).clamp(0.0, 1.0);
    [r as u8, g.min(255.0) as u8, b as u8]
}

fn draw_circle(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: [u8; 3]) {
    let r_out = radius + 0.9;
    let (x0, x1) = ((cx - r_out).floor() as i64, (cx + r_out).ceil() as i64);
    let (y0, y1) = ((cy - r_out).floor() as i64, (cy + r_out).ceil() as i64);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
                continue;
            }
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if (d - radius).abs() <= 0.9 {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// One cell: TD circles over the already-painted camera frame, plus the
/// summed BU saliency panel to its right.
fn draw_cell(img: &mut RgbImage, ox: usize, oy: usize, trace: &RolloutTrace, t: usize, image: usize) {
    let side = image * UPSCALE;
    for (k, pt) in trace.pt_td[t].iter().enumerate() {
        let (cx, cy) = point_to_panel_px(*pt, image, UPSCALE);
        let color = HEAD_COLORS[k % HEAD_COLORS.len()];
        draw_circle(img, ox as f64 + cx, oy as f64 + cy, 5.0, color);
        draw_circle(img, ox as f64 + cx, oy as f64 + cy, 1.0, color);
    }
    // Saliency panel.
    let maps = &trace.m_bu_sum[t];
    let g = maps.len();
    let cell = side / g;
    let max = maps
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f32, |m, &v| m.max(v));
    let hx = ox + side + PANEL_GAP;
    for gy in 0..g {
        for gx in 0..g {
            let v = if max > 0.0 { f64::from(maps[gy][gx] / max) } else { 0.0 };
            let c = heat_color(v);
            for py in 0..cell {
                for px in 0..cell {
                    img.put_pixel((hx + gx * cell + px) as u32, (oy + gy * cell + py) as u32, Rgb(c));
                }
            }
        }
    }
}

/// Render the Fig.-3-style development grid: columns are checkpoints,
/// rows are timesteps. Cells of missing checkpoints are grayed and crossed
/// out; generation continues.
pub fn render_attention_grid(
    run_dir: &Path,
    slot: usize,
    seed: u64,
    epochs: &[usize],
    timesteps: &[usize],
    out_png: &Path,
) -> Result<()> {
    let run = load_run_config(run_dir)?;
    if epochs.is_empty() || timesteps.is_empty() {
        return Err(Error::Analysis("need at least one checkpoint and one timestep".into()));
    }
    if let Some(&t) = timesteps.iter().find(|&&t| t >= run.env.steps) {
        return Err(Error::Analysis(format!(
            "timestep {t} out of range (episode has {} steps)",
            run.env.steps
        )));
    }

    let (model, mut ps) = build_model::<f32>(&run.model)?;
    let episode = crate::env::generate_episode(&run.env, slot, seed)?;
    // Open-loop traces per available checkpoint.
    let mut traces: Vec<Option<RolloutTrace>> = Vec::new();
    for &epoch in epochs {
        let path = run_dir.join(format!("ck_{epoch}.bin"));
        if !path.exists() {
            traces.push(None);
            continue;
        }
        load_checkpoint(&path, Some(&run.model.hash()), &mut ps)?;
        traces.push(Some(rollout(&model, &ps, &run.env, slot, seed, RolloutMode::OpenLoop)?));
    }

    let image = run.env.image;
    let side = image * UPSCALE;
    let cell_w = side * 2 + PANEL_GAP;
    let cell_h = side;
    let width = MARGIN * 2 + epochs.len() * cell_w + (epochs.len() - 1) * CELL_GAP;
    let height = MARGIN * 2 + timesteps.len() * cell_h + (timesteps.len() - 1) * CELL_GAP;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([24, 24, 28]));

    for (col, trace) in traces.iter().enumerate() {
        for (row, &t) in timesteps.iter().enumerate() {
            let ox = MARGIN + col * (cell_w + CELL_GAP);
            let oy = MARGIN + row * (cell_h + CELL_GAP);
            match trace {
                Some(trace) => {
                    // Paint the camera frame first, then points and panels.
                    for y in 0..image {
                        for x in 0..image {
                            let px = Rgb([
                                episode.frames[[t, 0, y, x]],
                                episode.frames[[t, 1, y, x]],
                                episode.frames[[t, 2, y, x]],
                            ]);
                            for uy in 0..UPSCALE {
                                for ux in 0..UPSCALE {
                                    img.put_pixel(
                                        (ox + x * UPSCALE + ux) as u32,
                                        (oy + y * UPSCALE + uy) as u32,
                                        px,
                                    );
                                }
                            }
                        }
                    }
                    draw_cell(&mut img, ox, oy, trace, t, image);
                }
                None => {
                    // Annotate the missing checkpoint: gray cell, crossed.
                    for y in 0..cell_h {
                        for x in 0..cell_w {
                            img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb([90, 90, 90]));
                        }
                    }
                    let (w, h) = (cell_w as f64 - 1.0, cell_h as f64 - 1.0);
                    let o = (ox as f64, oy as f64);
                    draw_line(&mut img, o, (o.0 + w, o.1 + h), [200, 60, 60]);
                    draw_line(&mut img, (o.0 + w, o.1), (o.0, o.1 + h), [200, 60, 60]);
                }
            }
        }
    }

    if let Some(dir) = out_png.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(out_png)
        .map_err(|e| Error::Analysis(format!("writing {}: {e}", out_png.display())))?;
    Ok(())
}

/// The similarity CSV: one row per recorded epoch, one column per TD head.
/// Values are printed with the shortest round-trip float representation, so
/// parsing the CSV recovers the records bit-for-bit.
pub fn similarity_csv(records: &[TrainRecord]) -> Result<String> {
    let heads = records
        .first()
        .ok_or_else(|| Error::Analysis("no records".into()))?
        .similarity
        .len();
    let mut out = String::from("epoch");
    for k in 0..heads {
        write!(out, ",attention_{}", k + 1).unwrap();
    }
    out.push('\n');
    for r in records {
        write!(out, "{}", r.epoch).unwrap();
        for v in &r.similarity {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Candidate paths for the sans-serif TTF used to label plots. The first one
/// that exists is registered once per process; `AMALGAM_FONT` overrides.
const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/local/share/fonts/DejaVuSans.ttf",
];

/// The text backend needs a font registered before any chart is drawn. The
/// font bytes intentionally leak: registration requires `'static` data and
/// happens at most once per process.
fn ensure_font() -> Result<()> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let overridden = std::env::var("AMALGAM_FONT").ok();
        let path = overridden
            .as_deref()
            .into_iter()
            .chain(FONT_PATHS)
            .find(|p| Path::new(p).exists())
            .ok_or_else(|| "no TTF font found; set AMALGAM_FONT to a .ttf path".to_string())?;
        let bytes = std::fs::read(path).map_err(|e| format!("{path}: {e}"))?;
        plotters::style::register_font(
            "sans-serif",
            plotters::style::FontStyle::Normal,
            Box::leak(bytes.into_boxed_slice()),
        )
        .map_err(|_| format!("{path}: not a usable font file"))
    })
    .clone()
    .map_err(Error::Analysis)
}

/// Plot one query-similarity curve per TD head over epochs.
pub fn plot_similarity_curves(records: &[TrainRecord], out_png: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Analysis("no records".into()));
    }
    ensure_font()?;
    let heads = records[0].similarity.len();
    let x_max = records.iter().map(|r| r.epoch).max().unwrap_or(1) as f64;
    let (mut y_min, mut y_max) = (f64::MAX, f64::MIN);
    for r in records {
        for &v in &r.similarity {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    let pad = ((y_max - y_min) * 0.05).max(0.01);
    if let Some(dir) = out_png.parent() {
        std::fs::create_dir_all(dir)?;
    }

    let root = BitMapBackend::new(out_png, (900, 600)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .x_label_area_size(44)
            .y_label_area_size(56)
            .caption("Query similarity per TD head", ("sans-serif", 22))
            .build_cartesian_2d(1.0..x_max.max(2.0), (y_min - pad)..(y_max + pad))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("max-over-BU cosine similarity (mean over steps)")
            .label_style(("sans-serif", 15))
            .draw()?;
        for k in 0..heads {
            let c = HEAD_COLORS[k % HEAD_COLORS.len()];
            let color = RGBColor(c[0], c[1], c[2]);
            chart
                .draw_series(LineSeries::new(
                    records.iter().map(|r| (r.epoch as f64, r.similarity[k])),
                    color.stroke_width(2),
                ))?
                .label(format!("attention {}", k + 1))
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(3))
                });
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Analysis(format!("plotting {}: {e}", out_png.display())))
}

/// Rendered results table plus a completeness flag (`false` when any cell
/// had no successful trials to aggregate, e.g. a variant whose jobs all
/// failed).
pub struct TableOutput {
    /// Human-readable fixed-width table.
    pub text: String,
    /// The same data as CSV.
    pub csv: String,
    /// False if any cell is a gap.
    pub complete: bool,
}

fn percent_cell(ok: usize, total: usize) -> Option<String> {
    (total > 0).then(|| format!("{:.1}", 100.0 * ok as f64 / total as f64))
}

/// Format the ablation results in the results-table layout: one column per
/// variant (Proposed first), success-rate rows. Cells without data render
/// as an em dash.
pub fn emit_results_table(results: &AblationResults) -> TableOutput {
    let order: Vec<VariantKind> = VariantKind::all()
        .iter()
        .copied()
        .filter(|k| results.variants.iter().any(|v| v.kind == *k))
        .collect();
    let mut complete = order.len() == VariantKind::all().len();

    let col = |kind: VariantKind| results.variants.iter().find(|v| v.kind == kind);
    let mut header = vec!["Success rate [%]".to_string()];
    for &k in &order {
        header.push(k.name().to_string());
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (label, counts) in [
        ("attention", true),
        ("pick", false),
    ] {
        let mut row = vec![format!("{label} success")];
        for &k in &order {
            let cell = col(k)
                .and_then(|v| {
                    let (ok, total) = if counts {
                        v.attention_counts()
                    } else {
                        v.pick_counts()
                    };
                    // Seeds that failed outright still count as trials with
                    // zero successes, but a variant with no evaluable seeds
                    // is a gap.
                    let evaluable = v.seeds.iter().any(|s| s.error.is_none());
                    (evaluable && total > 0).then(|| percent_cell(ok, total)).flatten()
                })
                .unwrap_or_else(|| {
                    complete = false;
                    "\u{2014}".to_string()
                });
            row.push(cell);
        }
        rows.push(row);
    }

    // Fixed-width text rendering.
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut text = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str(" | ");
            }
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
        }
        line
    };
    text.push_str(&fmt_row(&header, &widths));
    text.push('\n');
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 3 * (header.len() - 1)));
    text.push('\n');
    for row in &rows {
        text.push_str(&fmt_row(row, &widths));
        text.push('\n');
    }
    let seeds = results
        .seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    writeln!(
        text,
        "seeds: {seeds} ({} slots per seed; {} trials per cell)",
        results.slots,
        results.seeds.len() * results.slots
    )
    .unwrap();

    // CSV rendering.
    let mut csv = header.join(",");
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }

    TableOutput { text, csv, complete }
}

/// Convenience wrapper used by the CLI: read `results.json` from `in_dir`,
/// write `results_table.txt` / `results_table.csv` into `out_dir`.
pub fn report_table(in_dir: &Path, out_dir: &Path) -> Result<TableOutput> {
    let results = AblationResults::load(&in_dir.join("results.json"))?;
    let table = emit_results_table(&results);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results_table.txt"), &table.text)?;
    std::fs::write(out_dir.join("results_table.csv"), &table.csv)?;
    Ok(table)
}

/// Convenience wrapper used by the CLI: read `metrics.jsonl` from `in_dir`,
/// write `similarity.csv` and `similarity.png` into `out_dir`.
pub fn report_similarity(in_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    let records = read_metrics(&in_dir.join("metrics.jsonl"))?;
    std::fs::create_dir_all(out_dir)?;
    let csv = similarity_csv(&records)?;
    std::fs::write(out_dir.join("similarity.csv"), csv)?;
    let png = out_dir.join("similarity.png");
    plot_similarity_curves(&records, &png)?;
    Ok(png)
}
