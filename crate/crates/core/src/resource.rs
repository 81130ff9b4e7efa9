//! Storage and query-latency accounting for single- vs multi-feature banks.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bank::{image_record_bytes, BankKind, FeatureBank};
use crate::retrieval::{records_from_bank, score_images, ImageRecord, SourceTag};

/// Feature payload of one image: `rows * dim` f32 values.
pub fn payload_bytes(rows: usize, dim: usize) -> u64 {
    rows as u64 * dim as u64 * 4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub label: String,
    pub dim: usize,
    pub images: usize,
    pub rows_per_image: f64,
    pub payload_bytes_per_image: f64,
    /// Payload plus id, row count and box overhead as stored in a bank.
    pub disk_bytes_per_image: f64,
    /// Median wall-clock time to score every image for one query.
    pub query_median_ns: Option<u128>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub rows: Vec<ResourceRow>,
}

impl ResourceReport {
    pub fn row(&self, label: &str) -> Option<&ResourceRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Payload ratio `a / b`.
    pub fn compression(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.row(a)?.payload_bytes_per_image / self.row(b)?.payload_bytes_per_image)
    }

    /// Median latency ratio `a / b`.
    pub fn speedup(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.row(a)?.query_median_ns? as f64 / self.row(b)?.query_median_ns?.max(1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,dim,images,rows_per_image,payload_bytes_per_image,disk_bytes_per_image,query_median_ns\n");
        for r in &self.rows {
            let t = r.query_median_ns.map(|t| t.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label, r.dim, r.images, r.rows_per_image, r.payload_bytes_per_image, r.disk_bytes_per_image, t
            ));
        }
        s
    }
}

/// Static storage figures for one bank.
pub fn storage_row(label: &str, bank: &FeatureBank) -> ResourceRow {
    let n = bank.images.len().max(1) as f64;
    let rows: usize = bank.images.iter().map(|e| e.num_rows()).sum();
    let disk: u64 = bank.images.iter().map(|e| image_record_bytes(e.num_rows(), bank.dim)).sum();
    ResourceRow {
        label: label.into(),
        dim: bank.dim,
        images: bank.images.len(),
        rows_per_image: rows as f64 / n,
        payload_bytes_per_image: payload_bytes(rows, bank.dim) as f64 / n,
        disk_bytes_per_image: disk as f64 / n,
        query_median_ns: None,
    }
}

/// Median over `queries` of the time to rank all of `records`.
pub fn median_query_ns(records: &[ImageRecord], queries: &[Vec<f64>]) -> Option<u128> {
    if records.is_empty() || queries.is_empty() {
        return None;
    }
    let mut times: Vec<u128> = queries
        .iter()
        .map(|q| {
            let t = Instant::now();
            let ranked = score_images(q, records).expect("non-empty records");
            std::hint::black_box(ranked);
            t.elapsed().as_nanos()
        })
        .collect();
    times.sort_unstable();
    Some(times[times.len() / 2])
}

/// Storage rows for each labelled bank, plus query latency when `queries`
/// is non-empty.
pub fn resource_report(banks: &[(&str, &FeatureBank)], queries: &[Vec<f64>]) -> ResourceReport {
    let rows = banks
        .iter()
        .map(|(label, bank)| {
            let mut row = storage_row(label, bank);
            if bank.kind != BankKind::Text && !queries.is_empty() {
                let records = records_from_bank(bank, SourceTag::Fused).expect("image bank");
                row.query_median_ns = median_query_ns(&records, queries);
            }
            row
        })
        .collect();
    ResourceReport { rows }
}
