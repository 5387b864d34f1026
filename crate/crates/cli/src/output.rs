use std::path::{Path, PathBuf};

use clap::ValueEnum;
use imagine_sim::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    /// Comma-separated with a header row.
    Csv,
    /// Whitespace-separated columns, header commented out (gnuplot style).
    PlotData,
}

/// Writes result tables into one directory, each behind the provenance header.
pub struct OutputDir {
    dir: PathBuf,
    emit: Emit,
    header: String,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn new(dir: &Path, emit: Emit, header: String) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), emit, header, written: vec![] })
    }

    /// `csv` is a header row plus data rows; `stem` gets the extension of
    /// the selected format.
    pub fn write_table(&mut self, stem: &str, csv: &str) -> Result<PathBuf> {
        let (ext, body) = match self.emit {
            Emit::Csv => ("csv", csv.to_string()),
            Emit::PlotData => ("dat", to_plot_data(csv)),
        };
        let path = self.dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, format!("{}{body}", self.header))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Always CSV, whatever the emit format: downstream tools parse it.
    pub fn write_csv(&mut self, name: &str, csv: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, format!("{}{csv}", self.header))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

fn to_plot_data(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len() + 2);
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str("# ");
        }
        // empty CSV fields become "-" so the column count is preserved
        let fields: Vec<&str> = line.split(',').map(|f| if f.is_empty() { "-" } else { f }).collect();
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn provenance_header(command: &str, seed: u64, config_hash: &str) -> String {
    format!(
        "# imagine-sim {}\n# seed {seed}\n# config sha256:{config_hash}\n# command {command}\n",
        env!("CARGO_PKG_VERSION")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_data_keeps_columns() {
        assert_eq!(to_plot_data("a,b,c\n1,,3\n"), "# a b c\n1 - 3\n");
    }
}
