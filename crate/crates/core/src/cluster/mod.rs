//! Feature distances, the condensed distance matrix, and DBSCAN.

mod dbscan;
mod distance;

use std::io::{Read, Write};

pub use dbscan::{dbscan, dbscan_ordered, sweep, Clustering, DbscanParams, SweepEntry, NOISE};
pub use distance::{
    compute_distance_matrix, condensed_index, dist_freq, dist_path, CombinedMetric, DistanceKind,
    DistanceMatrix, Distances, Norms, OnTheFly, MATRIX_MAGIC, MATRIX_VERSION,
};

use crate::error::{Error, Result};
use crate::searchspace::ArchId;

pub const CLUSTERING_HEADER: &str = "arch_id,cluster_label";

pub fn write_clustering<W: Write>(mut out: W, ids: &[ArchId], clustering: &Clustering) -> Result<()> {
    if ids.len() != clustering.len() {
        return Err(Error::InvalidInput(format!(
            "{} ids for {} labels",
            ids.len(),
            clustering.len()
        )));
    }
    writeln!(out, "{CLUSTERING_HEADER}")?;
    for (id, label) in ids.iter().zip(&clustering.labels) {
        writeln!(out, "{id},{label}")?;
    }
    Ok(())
}

/// Reads `arch_id,cluster_label` rows. The returned clustering carries
/// `params` since the file does not record them.
pub fn read_clustering<R: Read>(input: R, params: DbscanParams) -> Result<(Vec<ArchId>, Clustering)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = reader.records();
    match records.next() {
        Some(Ok(h)) if h.iter().map(str::trim).eq(CLUSTERING_HEADER.split(',')) => {}
        _ => return Err(Error::parse(0, "expected header `arch_id,cluster_label`")),
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::parse(line, "expected 2 fields"));
        }
        let id = rec[0].parse::<ArchId>().map_err(|e| Error::parse(line, e.to_string()))?;
        let label = rec[1]
            .trim()
            .parse::<i32>()
            .ok()
            .filter(|&l| l >= NOISE)
            .ok_or_else(|| Error::parse(line, format!("bad cluster label `{}`", &rec[1])))?;
        ids.push(id);
        labels.push(label);
    }
    Ok((ids, Clustering::from_labels(labels, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clustering_csv_round_trip() {
        let ids = vec![ArchId(3), ArchId(7), ArchId(9)];
        let c = Clustering::from_labels(vec![0, NOISE, 1], DbscanParams::default());
        let mut buf = Vec::new();
        write_clustering(&mut buf, &ids, &c).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "arch_id,cluster_label\n3,0\n7,-1\n9,1\n");
        let (back_ids, back) = read_clustering(&buf[..], DbscanParams::default()).unwrap();
        assert_eq!(back_ids, ids);
        assert_eq!(back, c);
        assert!(matches!(
            read_clustering(&b"arch_id,cluster_label\n3,x\n"[..], DbscanParams::default()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_clustering(&b"3,0\n"[..], DbscanParams::default()),
            Err(Error::Parse { line: 0, .. })
        ));
    }
}
