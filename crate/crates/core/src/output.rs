//! CSV and newline-delimited JSON row writers.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::sgd::csv_error;

pub fn write_csv_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ndjson<T: Serialize, W: Write>(rows: &[T], mut out: W) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
