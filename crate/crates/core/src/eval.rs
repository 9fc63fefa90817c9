//! AUC and its per-species → group → region → overall aggregation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::data::{Grouping, PaTable, SiteTable};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from average ranks (Mann–Whitney U).
/// Returns `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; a tie group spanning ranks lo..=hi gets (lo+hi)/2.
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        start = end;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesAuc {
    pub species_id: String,
    pub group: String,
    pub region: String,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub species: Vec<SpeciesAuc>,
    /// Mean AUC per (region, group), over species with a defined AUC.
    pub group_means: BTreeMap<(String, String), f64>,
    /// Mean of the group means within each region.
    pub region_means: BTreeMap<String, f64>,
    /// Unweighted mean of the region means.
    pub general_average: Option<f64>,
    pub skipped_species: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn from_species(species: Vec<SpeciesAuc>) -> Self {
        let mut by_group: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut skipped = 0;
        for s in &species {
            match s.auc {
                Some(a) => by_group
                    .entry((s.region.clone(), s.group.clone()))
                    .or_default()
                    .push(a),
                None => skipped += 1,
            }
        }
        let group_means: BTreeMap<(String, String), f64> = by_group
            .into_iter()
            .filter_map(|(k, v)| mean(v).map(|m| (k, m)))
            .collect();
        let mut by_region: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ((region, _), m) in &group_means {
            by_region.entry(region.clone()).or_default().push(*m);
        }
        let region_means: BTreeMap<String, f64> = by_region
            .into_iter()
            .filter_map(|(k, v)| mean(v).map(|m| (k, m)))
            .collect();
        let general_average = mean(region_means.values().copied());
        if skipped > 0 {
            log::warn!("{skipped} species have an undefined AUC (single-class labels) and were excluded");
        }
        EvalReport {
            species,
            group_means,
            region_means,
            general_average,
            skipped_species: skipped,
        }
    }

    /// `species_id,group,region,auc,n_pos,n_neg`; undefined AUC is written as `NA`.
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["species_id", "group", "region", "auc", "n_pos", "n_neg"])
            .map_err(io)?;
        for s in &self.species {
            out.write_record([
                s.species_id.clone(),
                s.group.clone(),
                s.region.clone(),
                s.auc.map_or_else(|| "NA".to_owned(), |a| a.to_string()),
                s.n_pos.to_string(),
                s.n_neg.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    /// `region,mean_auc` per region followed by a `general_avg` row.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["region", "mean_auc"]).map_err(io)?;
        for (region, m) in &self.region_means {
            out.write_record([region.clone(), m.to_string()]).map_err(io)?;
        }
        out.write_record([
            "general_avg".to_owned(),
            self.general_average
                .map_or_else(|| "NA".to_owned(), |a| a.to_string()),
        ])
        .map_err(io)?;
        out.flush()?;
        Ok(())
    }
}

/// Scores every species of `model` at its presence-absence sites using the
/// logits; ranks, and hence AUC, are unaffected by the monotone map to
/// normalized intensity.
pub fn evaluate(
    model: &ModelParams,
    sites: &SiteTable,
    pa: &PaTable,
    grouping: &Grouping,
) -> Result<EvalReport> {
    let mut unknown_sites: Vec<&str> = pa
        .records
        .iter()
        .filter(|r| sites.index_of(&r.site_id).is_none())
        .map(|r| r.site_id.as_str())
        .collect();
    if !unknown_sites.is_empty() {
        unknown_sites.sort_unstable();
        unknown_sites.dedup();
        return Err(Error::Validation(format!(
            "presence-absence records reference unknown site_id(s): {}",
            unknown_sites.join(", ")
        )));
    }
    let species_index: HashMap<&str, usize> = model
        .species_ids
        .iter()
        .enumerate()
        .map(|(j, s)| (s.as_str(), j))
        .collect();
    let mut unknown_species: Vec<&str> = pa
        .records
        .iter()
        .filter(|r| !species_index.contains_key(r.species_id.as_str()))
        .map(|r| r.species_id.as_str())
        .collect();
    if !unknown_species.is_empty() {
        unknown_species.sort_unstable();
        unknown_species.dedup();
        return Err(Error::Validation(format!(
            "presence-absence records reference species not in the model: {}",
            unknown_species.join(", ")
        )));
    }

    // score each distinct PA site once
    let mut site_rows: Vec<usize> = pa
        .records
        .iter()
        .filter_map(|r| sites.index_of(&r.site_id))
        .collect();
    site_rows.sort_unstable();
    site_rows.dedup();
    let row_of: HashMap<usize, usize> = site_rows.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let logits = if site_rows.is_empty() {
        Matrix::zeros(0, model.n_species())
    } else {
        let x = model.standardize(&sites.covariates().select_rows(&site_rows))?;
        model.logits(&x)?
    };

    let mut per_species: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); model.n_species()];
    for r in &pa.records {
        let j = species_index[r.species_id.as_str()];
        let Some(i) = sites.index_of(&r.site_id) else {
            continue;
        };
        per_species[j].0.push(logits.get(row_of[&i], j));
        per_species[j].1.push(r.present);
    }

    let species = model
        .species_ids
        .iter()
        .zip(per_species)
        .filter(|(_, (scores, _))| !scores.is_empty())
        .map(|(id, (scores, labels))| {
            let (group, region) = grouping.lookup(id);
            let n_pos = labels.iter().filter(|&&l| l).count();
            SpeciesAuc {
                species_id: id.clone(),
                group: group.to_owned(),
                region: region.to_owned(),
                auc: auc(&scores, &labels),
                n_pos,
                n_neg: labels.len() - n_pos,
            }
        })
        .collect();
    Ok(EvalReport::from_species(species))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PaRecord;
    use crate::model::Architecture;

    #[test]
    fn worked_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(auc(&[0.3; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(
            auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]),
            Some(0.75)
        );
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(auc(&[0.1, 0.2], &[false, false]), None);
        assert_eq!(auc(&[], &[]), None);
    }

    fn setup() -> (ModelParams, SiteTable, PaTable) {
        let mut model = ModelParams::init(Architecture::new(1, 4, 0), 2, 0).unwrap();
        model.head_weights = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        model.species_ids = vec!["a".into(), "b".into()];
        let sites = SiteTable::new(
            (0..4).map(|i| format!("s{i}")).collect(),
            vec![[0.0, 0.0]; 4],
            vec!["t".into()],
            Matrix::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap(),
        )
        .unwrap();
        let rec = |s: usize, sp: &str, p: bool| PaRecord {
            site_id: format!("s{s}"),
            species_id: sp.into(),
            present: p,
        };
        let pa = PaTable {
            records: vec![
                rec(0, "a", false),
                rec(1, "a", true),
                rec(2, "a", false),
                rec(3, "a", true),
                rec(0, "b", true),
                rec(3, "b", false),
            ],
        };
        (model, sites, pa)
    }

    #[test]
    fn evaluate_scores_and_aggregates() {
        let (model, sites, pa) = setup();
        let report = evaluate(&model, &sites, &pa, &Grouping::default()).unwrap();
        assert_eq!(report.species.len(), 2);
        assert_eq!(report.species[0].auc, Some(0.75));
        assert_eq!(report.species[1].auc, Some(1.0));
        assert_eq!(report.general_average, Some(0.875));

        let mut g = Grouping::default();
        g.insert("a", "plants", "R1");
        g.insert("b", "birds", "R2");
        let report = evaluate(&model, &sites, &pa, &g).unwrap();
        assert_eq!(report.region_means["R1"], 0.75);
        assert_eq!(report.region_means["R2"], 1.0);
        assert_eq!(report.general_average, Some(0.875));
    }

    #[test]
    fn general_average_is_mean_of_region_means() {
        let s = |id: &str, g: &str, r: &str, a: f64| SpeciesAuc {
            species_id: id.into(),
            group: g.into(),
            region: r.into(),
            auc: Some(a),
            n_pos: 1,
            n_neg: 1,
        };
        let report = EvalReport::from_species(vec![
            s("1", "g1", "A", 0.6),
            s("2", "g1", "A", 0.8),
            s("3", "g2", "A", 0.9),
            s("4", "g1", "B", 0.5),
        ]);
        assert!((report.group_means[&("A".into(), "g1".into())] - 0.7).abs() < 1e-15);
        assert!((report.region_means["A"] - 0.8).abs() < 1e-15);
        assert!((report.general_average.unwrap() - 0.65).abs() < 1e-15);
    }

    #[test]
    fn undefined_species_are_excluded() {
        let (model, sites, mut pa) = setup();
        pa.records.retain(|r| !(r.species_id == "b" && !r.present));
        let report = evaluate(&model, &sites, &pa, &Grouping::default()).unwrap();
        assert_eq!(report.species[1].auc, None);
        assert_eq!(report.skipped_species, 1);
        assert_eq!(report.general_average, Some(0.75));
    }

    #[test]
    fn pa_row_order_does_not_matter() {
        let (model, sites, pa) = setup();
        let a = evaluate(&model, &sites, &pa, &Grouping::default()).unwrap();
        let mut rev = pa.clone();
        rev.records.reverse();
        let b = evaluate(&model, &sites, &rev, &Grouping::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_sites_are_listed() {
        let (model, sites, mut pa) = setup();
        pa.records[0].site_id = "ghost".into();
        pa.records[1].site_id = "phantom".into();
        let err = evaluate(&model, &sites, &pa, &Grouping::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ghost") && msg.contains("phantom"), "{msg}");
    }

    #[test]
    fn logits_and_normalized_intensities_give_the_same_auc() {
        let (model, sites, _) = setup();
        let x = model.standardize(sites.covariates()).unwrap();
        let z = model.logits(&x).unwrap();
        let q = model.predict_normalized(&x).unwrap();
        let labels = [false, true, false, true];
        for j in 0..2 {
            assert_eq!(auc(&z.column(j), &labels), auc(&q.column(j), &labels));
        }
    }

    #[test]
    fn csv_outputs() {
        let (model, sites, pa) = setup();
        let report = evaluate(&model, &sites, &pa, &Grouping::default()).unwrap();
        let mut buf = Vec::new();
        report.write_metrics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("species_id,group,region,auc,n_pos,n_neg\na,all,all,0.75,2,2\n"));
        let mut buf = Vec::new();
        report.write_summary_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "region,mean_auc\nall,0.875\ngeneral_avg,0.875\n"
        );
    }
}
