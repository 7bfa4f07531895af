//! Profile table I/O.
//!
//! Columns: `degree,ranks,batch_sizes,seq_len,iter_time_s`, with the list
//! columns written as `+`-joined integers (`8+16+32`).

use serde::{Deserialize, Serialize};

use super::{CostError, ProfileRecord};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    degree: u32,
    ranks: String,
    batch_sizes: String,
    seq_len: u32,
    iter_time_s: f64,
}

fn parse_list(field: &str, line: u64, text: &str) -> Result<Vec<u32>, CostError> {
    text.split('+')
        .map(|t| {
            t.trim().parse::<u32>().map_err(|e| {
                CostError::Profile(format!("line {line}: bad {field} entry `{t}`: {e}"))
            })
        })
        .collect()
}

fn join_list(xs: &[u32]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn read_profiles_csv(text: &str) -> Result<Vec<ProfileRecord>, CostError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| CostError::Profile(e.to_string()))?;
        let line = out.len() as u64 + 2;
        let rec = ProfileRecord {
            parallelism_degree: row.degree,
            packed_ranks: parse_list("ranks", line, &row.ranks)?,
            packed_batch_sizes: parse_list("batch_sizes", line, &row.batch_sizes)?,
            seq_len: row.seq_len,
            iter_time: row.iter_time_s,
        };
        rec.validate()
            .map_err(|m| CostError::Profile(format!("line {line}: {m}")))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_profiles_csv(records: &[ProfileRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(Row {
            degree: r.parallelism_degree,
            ranks: join_list(&r.packed_ranks),
            batch_sizes: join_list(&r.packed_batch_sizes),
            seq_len: r.seq_len,
            iter_time_s: r.iter_time,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}
