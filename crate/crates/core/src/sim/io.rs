use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{EventRecord, SimSnapshot};
use crate::error::{Error, Result};

/// One CSV row: `t, i, j, Q, Z, A, R, S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub t: f64,
    pub i: usize,
    pub j: usize,
    #[serde(rename = "Q")]
    pub q: u64,
    #[serde(rename = "Z")]
    pub z: u64,
    #[serde(rename = "A")]
    pub a: u64,
    #[serde(rename = "R")]
    pub r: u64,
    #[serde(rename = "S")]
    pub s: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Types are written 1-based, matching the node numbering.
pub fn write_snapshots_csv<W: Write>(w: W, snaps: &[SimSnapshot]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in snaps {
        for c in &s.classes {
            wr.serialize(SnapshotRow {
                t: s.t,
                i: c.node,
                j: c.ev_type + 1,
                q: c.q,
                z: c.z,
                a: c.accepted,
                r: c.rejected,
                s: c.service,
            })
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_snapshots_csv<R: Read>(r: R) -> Result<Vec<SnapshotRow>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_events_ndjson<W: Write>(mut w: W, events: &[EventRecord]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
