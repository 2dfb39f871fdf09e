//! Feature schemas, synthetic multi-view data, hybrid partitions, and CSV
//! dataset files.
//!
//! A sample's input is split into `D` feature blocks (views). The hybrid
//! partition hands every client a subset of the classes *and* a subset of the
//! blocks, so no client needs to hold the full sample set or the full feature
//! set. Client datasets physically contain only the owned blocks; labels stay
//! inside the client dataset and never reach server-side code.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Global layout of the feature space: how many blocks, how wide each block
/// is, the shared embedding width every extractor produces, and the number of
/// label classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    num_blocks: usize,
    block_widths: Vec<usize>,
    embed_width: usize,
    num_classes: usize,
}

impl FeatureSchema {
    pub fn new(block_widths: Vec<usize>, embed_width: usize, num_classes: usize) -> Result<Self> {
        if block_widths.is_empty() {
            return Err(Error::invalid("schema needs at least one feature block"));
        }
        if block_widths.iter().any(|w| *w == 0) || embed_width == 0 || num_classes == 0 {
            return Err(Error::invalid("schema widths and class count must be >= 1"));
        }
        Ok(FeatureSchema {
            num_blocks: block_widths.len(),
            block_widths,
            embed_width,
            num_classes,
        })
    }

    /// Schema with `num_blocks` blocks of one shared width.
    pub fn uniform(
        num_blocks: usize,
        block_width: usize,
        embed_width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Self::new(vec![block_width; num_blocks], embed_width, num_classes)
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_widths(&self) -> &[usize] {
        &self.block_widths
    }

    pub fn block_width(&self, d: usize) -> usize {
        self.block_widths[d]
    }

    pub fn embed_width(&self) -> usize {
        self.embed_width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Input width of a head consuming the embeddings of every block.
    pub fn global_head_input(&self) -> usize {
        self.num_blocks * self.embed_width
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.blocks.len() != self.num_blocks {
            return Err(Error::Schema(format!(
                "sample {} has {} blocks, schema declares {}",
                sample.id,
                sample.blocks.len(),
                self.num_blocks
            )));
        }
        for (d, block) in sample.blocks.iter().enumerate() {
            if block.len() != self.block_widths[d] {
                return Err(Error::Schema(format!(
                    "sample {} block {d} has width {}, schema declares {}",
                    sample.id,
                    block.len(),
                    self.block_widths[d]
                )));
            }
        }
        if sample.label >= self.num_classes {
            return Err(Error::Schema(format!(
                "sample {} label {} out of range for {} classes",
                sample.id, sample.label, self.num_classes
            )));
        }
        Ok(())
    }
}

/// One full-featured sample: all `D` blocks plus the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub blocks: Vec<Vec<f64>>,
    pub label: usize,
}

/// A sample as seen by one client: only the owned blocks, in global block
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSample {
    pub id: usize,
    pub blocks: Vec<Vec<f64>>,
    pub label: usize,
}

/// The data one client holds: its feature subset and its (restricted) samples.
///
/// Construction strips every block outside the feature set, so nothing built
/// on top of a `ClientDataset` can observe unowned features.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    client_id: usize,
    feature_set: Vec<usize>,
    samples: Vec<ClientSample>,
}

impl ClientDataset {
    pub fn new(
        client_id: usize,
        mut feature_set: Vec<usize>,
        full_samples: &[&Sample],
        schema: &FeatureSchema,
    ) -> Result<Self> {
        feature_set.sort_unstable();
        feature_set.dedup();
        if feature_set.is_empty() {
            return Err(Error::invalid(format!(
                "client {client_id} owns no feature blocks"
            )));
        }
        if *feature_set.last().expect("non-empty") >= schema.num_blocks() {
            return Err(Error::invalid(format!(
                "client {client_id} feature set exceeds schema blocks"
            )));
        }
        if full_samples.is_empty() {
            return Err(Error::invalid(format!("client {client_id} owns no samples")));
        }
        let samples = full_samples
            .iter()
            .map(|s| ClientSample {
                id: s.id,
                blocks: feature_set.iter().map(|&d| s.blocks[d].clone()).collect(),
                label: s.label,
            })
            .collect();
        Ok(ClientDataset {
            client_id,
            feature_set,
            samples,
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// Owned block indices, sorted ascending (global order).
    pub fn feature_set(&self) -> &[usize] {
        &self.feature_set
    }

    pub fn samples(&self) -> &[ClientSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Restrict a full-featured sample to this client's blocks, e.g. for
    /// evaluating the local model on held-out data.
    pub fn view_of(&self, sample: &Sample) -> Vec<Vec<f64>> {
        restrict_blocks(&sample.blocks, &self.feature_set)
    }
}

/// Pick the listed blocks out of a full block list, in the given order.
pub fn restrict_blocks(blocks: &[Vec<f64>], feature_set: &[usize]) -> Vec<Vec<f64>> {
    feature_set.iter().map(|&d| blocks[d].clone()).collect()
}

/// Who owns what: per-client class and view subsets plus the
/// `classes x blocks` coverage counts.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub class_sets: Vec<Vec<usize>>,
    pub view_sets: Vec<Vec<usize>>,
    /// `coverage[c][d]` = number of clients holding class `c` and view `d`.
    pub coverage: Vec<Vec<usize>>,
}

impl PartitionPlan {
    fn build(
        class_sets: Vec<Vec<usize>>,
        view_sets: Vec<Vec<usize>>,
        schema: &FeatureSchema,
    ) -> Self {
        let mut coverage = vec![vec![0usize; schema.num_blocks()]; schema.num_classes()];
        for (classes, views) in class_sets.iter().zip(&view_sets) {
            for &c in classes {
                for &d in views {
                    coverage[c][d] += 1;
                }
            }
        }
        PartitionPlan {
            class_sets,
            view_sets,
            coverage,
        }
    }

    /// Fraction of `(class, view)` cells no client covers; the share of the
    /// data that never takes part in training.
    pub fn unused_fraction(&self) -> f64 {
        let total: usize = self.coverage.iter().map(|row| row.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let unused = self
            .coverage
            .iter()
            .flatten()
            .filter(|count| **count == 0)
            .count();
        unused as f64 / total as f64
    }

    /// Structured key-value description of the partition.
    pub fn summary(&self, schema: &FeatureSchema) -> String {
        let mut out = String::new();
        out.push_str(&format!("schema.num_blocks={}\n", schema.num_blocks()));
        out.push_str(&format!(
            "schema.block_widths={}\n",
            join_usize(schema.block_widths())
        ));
        out.push_str(&format!("schema.embed_width={}\n", schema.embed_width()));
        out.push_str(&format!("schema.num_classes={}\n", schema.num_classes()));
        for (m, (classes, views)) in self.class_sets.iter().zip(&self.view_sets).enumerate() {
            out.push_str(&format!("client.{m}.classes={}\n", join_usize(classes)));
            out.push_str(&format!("client.{m}.views={}\n", join_usize(views)));
        }
        for (c, row) in self.coverage.iter().enumerate() {
            out.push_str(&format!("coverage.class.{c}={}\n", join_usize(row)));
        }
        out.push_str(&format!(
            "coverage.unused_fraction={}\n",
            self.unused_fraction()
        ));
        out
    }
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Generate Gaussian-blob multi-view data: per `(class, block)` a center is
/// drawn from a seeded generator scaled by `separation`, and each sample is
/// its class center plus unit Gaussian noise.
///
/// Deterministic given `seed`; samples are emitted class-major with ids
/// `0..C*n_per_class`.
pub fn gen_synthetic(
    schema: &FeatureSchema,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(separation > 0.0) {
        return Err(Error::invalid(format!(
            "separation {separation} must be > 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = schema.num_classes();
    let centers: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| {
            (0..schema.num_blocks())
                .map(|d| {
                    (0..schema.block_width(d))
                        .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(classes * n_per_class);
    let mut id = 0;
    for (label, class_centers) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let blocks = class_centers
                .iter()
                .map(|center| {
                    center
                        .iter()
                        .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            samples.push(Sample { id, blocks, label });
            id += 1;
        }
    }
    Ok(samples)
}

/// Split a class-balanced dataset into train and held-out test parts, taking
/// the last `test_per_class` samples of every class for testing.
pub fn split_test_per_class(
    samples: Vec<Sample>,
    test_per_class: usize,
) -> (Vec<Sample>, Vec<Sample>) {
    let mut index_of = std::collections::HashMap::new();
    let mut per_class: Vec<Vec<Sample>> = Vec::new();
    for s in samples {
        let idx = *index_of.entry(s.label).or_insert_with(|| {
            per_class.push(Vec::new());
            per_class.len() - 1
        });
        per_class[idx].push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in per_class {
        let keep = group.len().saturating_sub(test_per_class);
        test.extend(group.split_off(keep));
        train.extend(group);
    }
    (train, test)
}

const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Hybrid partition: every client draws `classes_per_client` classes and
/// `views_per_client` blocks (seeded, without replacement), and the samples of
/// each class are split evenly and disjointly among the clients holding it.
///
/// Draws are repeated until every block has at least one owner and every
/// client ends up with at least one sample; a bounded number of attempts
/// guards against infeasible requests.
pub fn partition_hybrid(
    samples: &[Sample],
    schema: &FeatureSchema,
    num_clients: usize,
    classes_per_client: usize,
    views_per_client: usize,
    seed: u64,
) -> Result<(Vec<ClientDataset>, PartitionPlan)> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if classes_per_client == 0 || classes_per_client > schema.num_classes() {
        return Err(Error::invalid(format!(
            "classes_per_client {classes_per_client} out of range 1..={}",
            schema.num_classes()
        )));
    }
    if views_per_client == 0 || views_per_client > schema.num_blocks() {
        return Err(Error::invalid(format!(
            "views_per_client {views_per_client} out of range 1..={}",
            schema.num_blocks()
        )));
    }
    for s in samples {
        schema.check_sample(s)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); schema.num_classes()];
    for s in samples {
        by_class[s.label].push(s);
    }

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let class_sets: Vec<Vec<usize>> = (0..num_clients)
            .map(|_| sample_without_replacement(&mut rng, schema.num_classes(), classes_per_client))
            .collect();
        let view_sets: Vec<Vec<usize>> = (0..num_clients)
            .map(|_| sample_without_replacement(&mut rng, schema.num_blocks(), views_per_client))
            .collect();

        let mut block_owned = vec![false; schema.num_blocks()];
        for views in &view_sets {
            for &d in views {
                block_owned[d] = true;
            }
        }
        if !block_owned.iter().all(|b| *b) {
            continue;
        }

        // Disjoint even split of each class among the clients that hold it.
        let mut per_client: Vec<Vec<&Sample>> = vec![Vec::new(); num_clients];
        for (c, class_samples) in by_class.iter().enumerate() {
            let owners: Vec<usize> = (0..num_clients)
                .filter(|m| class_sets[*m].contains(&c))
                .collect();
            if owners.is_empty() || class_samples.is_empty() {
                continue;
            }
            let n = class_samples.len();
            let base = n / owners.len();
            let rem = n % owners.len();
            let mut offset = 0;
            for (rank, &m) in owners.iter().enumerate() {
                let take = base + usize::from(rank < rem);
                per_client[m].extend(&class_samples[offset..offset + take]);
                offset += take;
            }
        }
        if per_client.iter().any(|list| list.is_empty()) {
            continue;
        }

        let plan = PartitionPlan::build(class_sets, view_sets.clone(), schema);
        let clients = per_client
            .into_iter()
            .enumerate()
            .map(|(m, list)| ClientDataset::new(m, view_sets[m].clone(), &list, schema))
            .collect::<Result<Vec<_>>>()?;
        return Ok((clients, plan));
    }

    Err(Error::invalid(format!(
        "no valid hybrid partition found in {MAX_PARTITION_ATTEMPTS} attempts \
         (some block or client kept coming up empty)"
    )))
}

fn sample_without_replacement<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Load a dataset from CSV: blocks concatenated in block order, label last,
/// no header. Ids are assigned `0..N-1` in row order.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Vec<Sample>> {
    let expected: usize = schema.block_widths().iter().sum::<usize>() + 1;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != expected {
            return Err(Error::Schema(format!(
                "line {line} has {} columns, schema requires {expected}",
                record.len()
            )));
        }
        let mut fields = record.iter();
        let mut blocks = Vec::with_capacity(schema.num_blocks());
        for d in 0..schema.num_blocks() {
            let block = (0..schema.block_width(d))
                .map(|_| {
                    let field = fields.next().expect("width checked");
                    field.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line,
                        reason: format!("bad number `{field}`: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            blocks.push(block);
        }
        let label_field = fields.next().expect("width checked");
        let label = label_field
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Parse {
                line,
                reason: format!("bad label `{label_field}`: {e}"),
            })?;
        if label >= schema.num_classes() {
            return Err(Error::Schema(format!(
                "line {line} label {label} out of range for {} classes",
                schema.num_classes()
            )));
        }
        samples.push(Sample {
            id: idx,
            blocks,
            label,
        });
    }
    Ok(samples)
}

/// Write a dataset in the [`load_csv`] layout. Floats print in shortest
/// round-trip form, so save -> load reproduces values exactly.
pub fn save_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))?;
    for s in samples {
        let mut row: Vec<String> = Vec::new();
        for block in &s.blocks {
            row.extend(block.iter().map(|v| v.to_string()));
        }
        row.push(s.label.to_string());
        writer
            .write_record(&row)
            .map_err(|e| Error::invalid(format!("csv write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schema() -> FeatureSchema {
        FeatureSchema::uniform(2, 3, 2, 2).unwrap()
    }

    #[test]
    fn synthetic_counts_per_label() {
        let schema = FeatureSchema::uniform(2, 2, 2, 3).unwrap();
        let samples = gen_synthetic(&schema, 5, 4.0, 9).unwrap();
        assert_eq!(samples.len(), 15);
        for c in 0..3 {
            assert_eq!(samples.iter().filter(|s| s.label == c).count(), 5);
        }
        assert!(samples.iter().enumerate().all(|(i, s)| s.id == i));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let schema = small_schema();
        let a = gen_synthetic(&schema, 8, 5.0, 123).unwrap();
        let b = gen_synthetic(&schema, 8, 5.0, 123).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&schema, 8, 5.0, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_nonpositive_separation() {
        let schema = small_schema();
        assert!(gen_synthetic(&schema, 4, 0.0, 1).is_err());
        assert!(gen_synthetic(&schema, 4, -1.0, 1).is_err());
    }

    /// Nearest-centroid classification on well-separated blobs should be
    /// nearly perfect; the centroids are re-estimated from the data itself.
    #[test]
    fn nearest_centroid_oracle_on_separated_data() {
        let schema = FeatureSchema::uniform(2, 4, 2, 2).unwrap();
        let samples = gen_synthetic(&schema, 200, 10.0, 77).unwrap();

        let flat = |s: &Sample| -> Vec<f64> { s.blocks.concat() };
        let dim: usize = schema.block_widths().iter().sum();
        let mut centroids = vec![vec![0.0; dim]; 2];
        let mut counts = [0usize; 2];
        for s in &samples {
            counts[s.label] += 1;
            for (acc, x) in centroids[s.label].iter_mut().zip(flat(s)) {
                *acc += x;
            }
        }
        for (centroid, count) in centroids.iter_mut().zip(counts) {
            for v in centroid.iter_mut() {
                *v /= count as f64;
            }
        }

        let mut correct = 0;
        for s in &samples {
            let x = flat(s);
            let dist = |c: &[f64]| -> f64 {
                c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let pred = usize::from(dist(&centroids[1]) < dist(&centroids[0]));
            if pred == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / samples.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn single_client_partition_is_centralized() {
        let schema = FeatureSchema::uniform(3, 2, 2, 4).unwrap();
        let samples = gen_synthetic(&schema, 6, 3.0, 5).unwrap();
        let (clients, plan) = partition_hybrid(&samples, &schema, 1, 4, 3, 11).unwrap();
        assert_eq!(clients.len(), 1);
        assert_eq!(clients[0].feature_set(), &[0, 1, 2]);
        assert_eq!(clients[0].len(), samples.len());
        assert_eq!(plan.unused_fraction(), 0.0);
    }

    #[test]
    fn hybrid_partition_matches_requested_sizes() {
        // Analog of a 4-client, 4-view setup where each client sees 30 of 40
        // classes and 3 of 4 views.
        let schema = FeatureSchema::uniform(4, 2, 2, 40).unwrap();
        let samples = gen_synthetic(&schema, 4, 3.0, 21).unwrap();
        let (clients, plan) = partition_hybrid(&samples, &schema, 4, 30, 3, 31).unwrap();
        assert_eq!(clients.len(), 4);
        for m in 0..4 {
            assert_eq!(plan.class_sets[m].len(), 30);
            assert_eq!(plan.view_sets[m].len(), 3);
            assert_eq!(clients[m].feature_set(), plan.view_sets[m].as_slice());
        }
        for d in 0..4 {
            assert!(plan.view_sets.iter().any(|v| v.contains(&d)));
        }
    }

    #[test]
    fn coverage_row_sums_match_brute_force_recount() {
        let schema = FeatureSchema::uniform(5, 2, 2, 6).unwrap();
        let samples = gen_synthetic(&schema, 10, 3.0, 2).unwrap();
        let (_, plan) = partition_hybrid(&samples, &schema, 3, 4, 2, 17).unwrap();
        for c in 0..6 {
            let row_sum: usize = plan.coverage[c].iter().sum();
            let owners = plan
                .class_sets
                .iter()
                .filter(|classes| classes.contains(&c))
                .count();
            assert_eq!(row_sum, owners * 2);

            // Independent recount straight from the client sets.
            for d in 0..5 {
                let recount = plan
                    .class_sets
                    .iter()
                    .zip(&plan.view_sets)
                    .filter(|(classes, views)| classes.contains(&c) && views.contains(&d))
                    .count();
                assert_eq!(plan.coverage[c][d], recount);
            }
        }
    }

    #[test]
    fn shared_classes_split_disjointly() {
        let schema = FeatureSchema::uniform(2, 2, 2, 3).unwrap();
        let samples = gen_synthetic(&schema, 9, 3.0, 4).unwrap();
        let (clients, plan) = partition_hybrid(&samples, &schema, 3, 2, 1, 8).unwrap();

        let mut seen = std::collections::HashSet::new();
        for client in &clients {
            for s in client.samples() {
                assert!(seen.insert(s.id), "sample {} assigned twice", s.id);
            }
        }
        // Every sample of an owned class is assigned to exactly one owner.
        for c in 0..3 {
            let owners = plan
                .class_sets
                .iter()
                .filter(|classes| classes.contains(&c))
                .count();
            let assigned: usize = clients
                .iter()
                .map(|cl| cl.samples().iter().filter(|s| s.label == c).count())
                .sum();
            if owners > 0 {
                assert_eq!(assigned, 9);
            } else {
                assert_eq!(assigned, 0);
            }
        }
    }

    #[test]
    fn client_view_hides_unowned_blocks() {
        let schema = FeatureSchema::uniform(3, 2, 2, 2).unwrap();
        let samples = gen_synthetic(&schema, 4, 3.0, 6).unwrap();
        let refs: Vec<&Sample> = samples.iter().collect();
        let client = ClientDataset::new(0, vec![2, 0], &refs, &schema).unwrap();
        assert_eq!(client.feature_set(), &[0, 2]);
        for (cs, full) in client.samples().iter().zip(&samples) {
            assert_eq!(cs.blocks.len(), 2);
            assert_eq!(cs.blocks[0], full.blocks[0]);
            assert_eq!(cs.blocks[1], full.blocks[2]);
        }
    }

    #[test]
    fn unused_fraction_reported_for_heterogeneous_partition() {
        // 8 clients over 12 views and a restricted class set leaves some
        // (class, view) cells uncovered; the plan must report that share.
        let schema = FeatureSchema::uniform(12, 2, 2, 8).unwrap();
        let samples = gen_synthetic(&schema, 16, 3.0, 3).unwrap();
        let (_, plan) = partition_hybrid(&samples, &schema, 8, 3, 6, 19).unwrap();
        let frac = plan.unused_fraction();
        assert!((0.0..1.0).contains(&frac));
        let recount = plan
            .coverage
            .iter()
            .flatten()
            .filter(|c| **c == 0)
            .count() as f64
            / (12.0 * 8.0);
        assert_eq!(frac, recount);
        let summary = plan.summary(&schema);
        assert!(summary.contains("coverage.unused_fraction="));
    }

    #[test]
    fn csv_parses_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "0.1,0.2,0.3,1\n1,2,3,0\n").unwrap();
        let schema = FeatureSchema::new(vec![2, 1], 2, 2).unwrap();
        let samples = load_csv(&path, &schema).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].blocks, vec![vec![0.1, 0.2], vec![0.3]]);
        assert_eq!(samples[0].label, 1);
        assert_eq!(samples[0].id, 0);
        assert_eq!(samples[1].blocks, vec![vec![1.0, 2.0], vec![3.0]]);
        assert_eq!(samples[1].id, 1);
    }

    #[test]
    fn csv_empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        let schema = small_schema();
        assert!(load_csv(&path, &schema).unwrap().is_empty());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let schema = FeatureSchema::new(vec![3, 2], 2, 4).unwrap();
        let samples = gen_synthetic(&schema, 7, 2.5, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.csv");
        save_csv(&path, &samples).unwrap();
        let loaded = load_csv(&path, &schema).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn csv_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0.1,0.2,0.3,1\n0.1,x,0.3,0\n").unwrap();
        let schema = FeatureSchema::new(vec![2, 1], 2, 2).unwrap();
        match load_csv(&path, &schema) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("narrow.csv");
        std::fs::write(&path, "0.1,0.2,1\n").unwrap();
        let schema = FeatureSchema::new(vec![2, 1], 2, 2).unwrap();
        assert!(matches!(load_csv(&path, &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn split_holds_out_per_class() {
        let schema = FeatureSchema::uniform(2, 2, 2, 3).unwrap();
        let samples = gen_synthetic(&schema, 10, 3.0, 15).unwrap();
        let (train, test) = split_test_per_class(samples, 4);
        assert_eq!(train.len(), 18);
        assert_eq!(test.len(), 12);
        for c in 0..3 {
            assert_eq!(test.iter().filter(|s| s.label == c).count(), 4);
        }
        let train_ids: std::collections::HashSet<usize> = train.iter().map(|s| s.id).collect();
        assert!(test.iter().all(|s| !train_ids.contains(&s.id)));
    }
}
