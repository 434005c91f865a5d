//! Per-channel lookup-table recoloring that speaks the external
//! normalizer protocol: `stainbench-lut --manifest M --out DIR`.
//!
//! Each channel maps `v -> round(255 * (v / 255)^gamma)`; the default
//! gammas of 1 give the identity.

use std::path::PathBuf;

use clap::Parser;
use stainbench::color::TilePixels;
use stainbench::manifest::read_csv;
use stainbench::normalize::EXTERNAL_MANIFEST_HEADER;

#[derive(Debug, Parser)]
#[command(name = "stainbench-lut", about = "Channel lookup-table recoloring of manifest tiles")]
struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Gamma per channel as `r,g,b`.
    #[arg(long, default_value = "1,1,1")]
    gamma: String,
}

fn lut(gamma: f64) -> [u8; 256] {
    std::array::from_fn(|v| (255.0 * (v as f64 / 255.0).powf(gamma)).round().clamp(0.0, 255.0) as u8)
}

fn run(args: &Args) -> Result<(), String> {
    let gammas: Vec<f64> = args
        .gamma
        .split(',')
        .map(|g| g.trim().parse::<f64>().map_err(|e| format!("--gamma {g:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if gammas.len() != 3 || gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err("--gamma needs three positive values".into());
    }
    let tables = [lut(gammas[0]), lut(gammas[1]), lut(gammas[2])];
    let rows = read_csv(&args.manifest, &EXTERNAL_MANIFEST_HEADER).map_err(|e| e.to_string())?;
    let base = args.manifest.parent().map(PathBuf::from).unwrap_or_default();
    std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    for row in rows {
        let path = base.join(&row[2]);
        let tile = TilePixels::read_png(&path).map_err(|e| e.to_string())?;
        let data = tile
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| tables[i % 3][v as usize])
            .collect();
        let out = TilePixels::new(tile.width(), tile.height(), data).map_err(|e| e.to_string())?;
        out.write_png(&args.out.join(format!("{}.png", row[0])))
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() {
    let args = Args::parse();
    if let Err(e) = run(&args) {
        eprintln!("stainbench-lut: {e}");
        std::process::exit(2);
    }
}
