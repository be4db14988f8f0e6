//! Evaluation rows, the aligned text table and the CSV they round-trip through.

use std::io::Write;

pub const CSV_COLUMNS: [&str; 6] = ["file", "snr_db", "noisy_si_snr_db", "enhanced_si_snr_db", "delta_db", "rtf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub file: String,
    pub snr_db: f64,
    pub noisy_si_snr_db: f64,
    pub enhanced_si_snr_db: f64,
    pub rtf: f64,
}

impl Row {
    pub fn delta_db(&self) -> f64 {
        self.enhanced_si_snr_db - self.noisy_si_snr_db
    }
}

/// Column means, labelled `mean`.
pub fn mean_row(rows: &[Row]) -> Option<Row> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&Row) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(Row {
        file: "mean".into(),
        snr_db: avg(|r| r.snr_db),
        noisy_si_snr_db: avg(|r| r.noisy_si_snr_db),
        enhanced_si_snr_db: avg(|r| r.enhanced_si_snr_db),
        rtf: avg(|r| r.rtf),
    })
}

fn cells(r: &Row) -> [String; 6] {
    [
        r.file.clone(),
        format!("{:.2}", r.snr_db),
        format!("{:.4}", r.noisy_si_snr_db),
        format!("{:.4}", r.enhanced_si_snr_db),
        format!("{:.4}", r.delta_db()),
        format!("{:.4}", r.rtf),
    ]
}

/// Per-file rows, a rule, then the mean row.
pub fn table(rows: &[Row]) -> String {
    let mut lines: Vec<[String; 6]> = vec![CSV_COLUMNS.map(String::from)];
    lines.extend(rows.iter().map(cells));
    let mean = mean_row(rows).map(|m| cells(&m));
    let mut width = [0usize; 6];
    for l in lines.iter().chain(&mean) {
        for (w, c) in width.iter_mut().zip(l) {
            *w = (*w).max(c.len());
        }
    }
    let fmt = |l: &[String; 6]| {
        let mut s = format!("{:<w$}", l[0], w = width[0]);
        for (c, w) in l.iter().zip(width).skip(1) {
            s.push_str(&format!("  {c:>w$}"));
        }
        s + "\n"
    };
    let mut out: String = lines.iter().map(fmt).collect();
    if let Some(m) = &mean {
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * 5));
        out.push('\n');
        out.push_str(&fmt(m));
    }
    out
}

/// CSV with a header, one row per file and a final `mean` row.
pub fn write_csv<W: Write>(w: W, rows: &[Row]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_COLUMNS)?;
    for r in rows.iter().chain(&mean_row(rows)) {
        wr.write_record(cells(r))?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
/// Parse CSV written by [`write_csv`], including the `mean` row.
pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<Row>, String> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(CSV_COLUMNS) {
        return Err(format!("unexpected CSV header {header:?}"));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| format!("bad number {:?}", &rec[i]));
        out.push(Row {
            file: rec[0].to_string(),
            snr_db: num(1)?,
            noisy_si_snr_db: num(2)?,
            enhanced_si_snr_db: num(3)?,
            rtf: num(5)?,
        });
    }
    Ok(out)
}
