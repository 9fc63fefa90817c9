//! Site and occurrence tables, their CSV formats, Target-Group Background
//! site selection, epoch batching and spatial block assignment.
//!
//! CSV layouts (UTF-8, comma separated, header row required):
//!
//! * sites: `site_id,x,y,<cov1>,...,<covP>`
//! * occurrences, long: `site_id,species_id,count`
//! * occurrences, wide: `site_id,<sp1>,...,<spN>`
//! * presence-absence: `site_id,species_id,present` with `present` in {0,1}
//! * species groups: `species_id,group,region`

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTable {
    site_ids: Vec<String>,
    coords: Vec<[f64; 2]>,
    covariate_names: Vec<String>,
    covariates: Matrix,
    index: HashMap<String, usize>,
}

impl SiteTable {
    pub fn new(
        site_ids: Vec<String>,
        coords: Vec<[f64; 2]>,
        covariate_names: Vec<String>,
        covariates: Matrix,
    ) -> Result<Self> {
        let k = site_ids.len();
        if coords.len() != k || covariates.rows() != k {
            return Err(Error::dim(
                "site_table",
                format!(
                    "{k} ids, {} coordinates, {} covariate rows",
                    coords.len(),
                    covariates.rows()
                ),
            ));
        }
        if covariates.cols() != covariate_names.len() {
            return Err(Error::dim(
                "site_table",
                format!(
                    "{} covariate names for {} columns",
                    covariate_names.len(),
                    covariates.cols()
                ),
            ));
        }
        if !covariates.is_finite() || coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("site values must be finite".into()));
        }
        let mut index = HashMap::with_capacity(k);
        for (i, id) in site_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate site_id `{id}`")));
            }
        }
        Ok(SiteTable {
            site_ids,
            coords,
            covariate_names,
            covariates,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.site_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.site_ids.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Raw covariates, one row per site.
    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    pub fn index_of(&self, site_id: &str) -> Option<usize> {
        self.index.get(site_id).copied()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site_id".to_owned(), "x".into(), "y".into()];
        header.extend(self.covariate_names.iter().cloned());
        out.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.site_ids[i].clone(),
                self.coords[i][0].to_string(),
                self.coords[i][1].to_string(),
            ];
            rec.extend(self.covariates.row(i).iter().map(f64::to_string));
            out.write_record(&rec).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceMatrix {
    species_ids: Vec<String>,
    counts: Matrix,
    totals: Vec<f64>,
}

impl OccurrenceMatrix {
    /// `counts` is `K × N` with nonnegative integer values.
    pub fn new(species_ids: Vec<String>, counts: Matrix) -> Result<Self> {
        if counts.cols() != species_ids.len() {
            return Err(Error::dim(
                "occurrence_matrix",
                format!("{} species ids for {} columns", species_ids.len(), counts.cols()),
            ));
        }
        if let Some(v) = counts
            .data()
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0))
        {
            return Err(Error::Validation(format!(
                "occurrence counts must be nonnegative integers, found {v}"
            )));
        }
        let mut seen = HashMap::new();
        for id in &species_ids {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate species_id `{id}`")));
            }
        }
        let totals = counts.column_sums();
        Ok(OccurrenceMatrix {
            species_ids,
            counts,
            totals,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.counts.rows()
    }

    pub fn n_species(&self) -> usize {
        self.species_ids.len()
    }

    pub fn species_ids(&self) -> &[String] {
        &self.species_ids
    }

    pub fn counts(&self) -> &Matrix {
        &self.counts
    }

    /// `w_j = Σ_i y_ij`.
    pub fn species_totals(&self) -> &[f64] {
        &self.totals
    }

    /// Total number of records at each site, all species combined.
    pub fn site_totals(&self) -> Vec<f64> {
        self.counts.row_sums()
    }

    /// Restricts to the given species columns, in order.
    pub fn select_species(&self, columns: &[usize]) -> Result<OccurrenceMatrix> {
        let mut counts = Matrix::zeros(self.n_sites(), columns.len());
        for i in 0..self.n_sites() {
            for (c, &j) in columns.iter().enumerate() {
                counts.set(i, c, self.counts.get(i, j));
            }
        }
        let ids = columns.iter().map(|&j| self.species_ids[j].clone()).collect();
        OccurrenceMatrix::new(ids, counts)
    }

    /// Long format, one row per nonzero (site, species) pair in site order.
    pub fn write_long_csv<W: Write>(&self, sites: &SiteTable, w: W) -> Result<()> {
        self.check_sites(sites)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["site_id", "species_id", "count"])
            .map_err(csv_io)?;
        for i in 0..self.n_sites() {
            for (j, sp) in self.species_ids.iter().enumerate() {
                let c = self.counts.get(i, j);
                if c > 0.0 {
                    out.write_record([sites.site_ids()[i].as_str(), sp, &c.to_string()])
                        .map_err(csv_io)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Wide format, one row per site.
    pub fn write_wide_csv<W: Write>(&self, sites: &SiteTable, w: W) -> Result<()> {
        self.check_sites(sites)?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["site_id".to_owned()];
        header.extend(self.species_ids.iter().cloned());
        out.write_record(&header).map_err(csv_io)?;
        for i in 0..self.n_sites() {
            let mut rec = vec![sites.site_ids()[i].clone()];
            rec.extend(self.counts.row(i).iter().map(f64::to_string));
            out.write_record(&rec).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    fn check_sites(&self, sites: &SiteTable) -> Result<()> {
        if sites.len() != self.n_sites() {
            return Err(Error::dim(
                "occurrence_matrix",
                format!("{} sites in table, {} count rows", sites.len(), self.n_sites()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaRecord {
    pub site_id: String,
    pub species_id: String,
    pub present: bool,
}

/// Presence-absence survey records used for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PaTable {
    pub records: Vec<PaRecord>,
}

impl PaTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["site_id", "species_id", "present"])
            .map_err(csv_io)?;
        for r in &self.records {
            out.write_record([
                r.site_id.as_str(),
                r.species_id.as_str(),
                if r.present { "1" } else { "0" },
            ])
            .map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Species → (biological group, region) used for aggregating evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Grouping {
    entries: HashMap<String, (String, String)>,
}

impl Grouping {
    pub fn insert(&mut self, species: &str, group: &str, region: &str) {
        self.entries
            .insert(species.to_owned(), (group.to_owned(), region.to_owned()));
    }

    /// Group and region of a species; unlisted species fall into `all`/`all`.
    pub fn lookup(&self, species: &str) -> (&str, &str) {
        self.entries
            .get(species)
            .map_or(("all", "all"), |(g, r)| (g.as_str(), r.as_str()))
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

struct CsvSource {
    path: PathBuf,
    reader: csv::Reader<Box<dyn Read>>,
}

impl CsvSource {
    fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Ok(Self::from_reader(path, Box::new(file)))
    }

    fn from_reader(path: &Path, r: Box<dyn Read>) -> Self {
        let reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(r);
        CsvSource {
            path: path.to_owned(),
            reader,
        }
    }

    fn err(&self, line: u64, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn header(&mut self) -> Result<Vec<String>> {
        let h = self
            .reader
            .headers()
            .map_err(|e| Error::Parse {
                path: self.path.clone(),
                line: 1,
                msg: e.to_string(),
            })?
            .iter()
            .map(str::to_owned)
            .collect();
        Ok(h)
    }

    /// All records with their 1-based line numbers.
    fn records(&mut self) -> Result<Vec<(u64, csv::StringRecord)>> {
        let mut out = Vec::new();
        let path = self.path.clone();
        for rec in self.reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            out.push((line, rec));
        }
        Ok(out)
    }

    fn number(&self, line: u64, field: &str, what: &str) -> Result<f64> {
        let v: f64 = field
            .parse()
            .map_err(|_| self.err(line, format!("{what}: `{field}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("{what}: `{field}` is not finite")));
        }
        Ok(v)
    }

    fn count(&self, line: u64, field: &str, what: &str) -> Result<f64> {
        let v = self.number(line, field, what)?;
        if v < 0.0 {
            return Err(self.err(line, format!("{what}: negative count {field}")));
        }
        if v.fract() != 0.0 {
            return Err(self.err(line, format!("{what}: count {field} is not an integer")));
        }
        Ok(v)
    }
}

pub fn load_sites(path: impl AsRef<Path>) -> Result<SiteTable> {
    let mut src = CsvSource::open(path.as_ref())?;
    read_sites(&mut src)
}

fn read_sites(src: &mut CsvSource) -> Result<SiteTable> {
    let header = src.header()?;
    if header.len() < 4 || header[0] != "site_id" || header[1] != "x" || header[2] != "y" {
        return Err(src.err(
            1,
            "sites header must be `site_id,x,y,<cov1>,...` with at least one covariate",
        ));
    }
    let names: Vec<String> = header[3..].to_vec();
    let p = names.len();
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut values = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for (line, rec) in src.records()? {
        if rec.len() != p + 3 {
            return Err(src.err(
                line,
                format!("expected {} fields, found {}", p + 3, rec.len()),
            ));
        }
        let id = rec[0].to_owned();
        if id.is_empty() {
            return Err(src.err(line, "empty site_id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(src.err(
                line,
                format!("duplicate site_id `{id}` (first seen on line {first})"),
            ));
        }
        let x = src.number(line, &rec[1], "x")?;
        let y = src.number(line, &rec[2], "y")?;
        for (c, name) in names.iter().enumerate() {
            let field = &rec[c + 3];
            if field.is_empty() {
                return Err(src.err(line, format!("missing value for covariate `{name}`")));
            }
            values.push(src.number(line, field, name)?);
        }
        ids.push(id);
        coords.push([x, y]);
    }
    let k = ids.len();
    SiteTable::new(ids, coords, names, Matrix::from_vec(k, p, values)?)
}

/// Loads occurrences in either long or wide layout, detected from the header.
/// Sites absent from the file have zero counts; long-format duplicates add up.
pub fn load_occurrences(path: impl AsRef<Path>, sites: &SiteTable) -> Result<OccurrenceMatrix> {
    let mut src = CsvSource::open(path.as_ref())?;
    read_occurrences(&mut src, sites)
}

fn read_occurrences(src: &mut CsvSource, sites: &SiteTable) -> Result<OccurrenceMatrix> {
    let header = src.header()?;
    if header.first().map(String::as_str) != Some("site_id") || header.len() < 2 {
        return Err(src.err(1, "occurrence header must start with `site_id`"));
    }
    let resolve = |src: &CsvSource, line: u64, id: &str| {
        sites
            .index_of(id)
            .ok_or_else(|| src.err(line, format!("unknown site_id `{id}`")))
    };

    if header == ["site_id", "species_id", "count"] {
        let mut species: Vec<String> = Vec::new();
        let mut species_index: HashMap<String, usize> = HashMap::new();
        let mut entries = Vec::new();
        for (line, rec) in src.records()? {
            if rec.len() != 3 {
                return Err(src.err(line, format!("expected 3 fields, found {}", rec.len())));
            }
            let i = resolve(src, line, &rec[0])?;
            if rec[1].is_empty() {
                return Err(src.err(line, "empty species_id"));
            }
            let j = *species_index.entry(rec[1].to_owned()).or_insert_with(|| {
                species.push(rec[1].to_owned());
                species.len() - 1
            });
            let c = src.count(line, &rec[2], "count")?;
            entries.push((i, j, c));
        }
        let mut counts = Matrix::zeros(sites.len(), species.len());
        for (i, j, c) in entries {
            let v = counts.get(i, j) + c;
            counts.set(i, j, v);
        }
        OccurrenceMatrix::new(species, counts)
    } else {
        let species: Vec<String> = header[1..].to_vec();
        let n = species.len();
        let mut counts = Matrix::zeros(sites.len(), n);
        let mut seen: HashMap<usize, u64> = HashMap::new();
        for (line, rec) in src.records()? {
            if rec.len() != n + 1 {
                return Err(src.err(
                    line,
                    format!("expected {} fields, found {}", n + 1, rec.len()),
                ));
            }
            let i = resolve(src, line, &rec[0])?;
            if let Some(first) = seen.insert(i, line) {
                return Err(src.err(
                    line,
                    format!("site `{}` already listed on line {first}", &rec[0]),
                ));
            }
            for (j, sp) in species.iter().enumerate() {
                let c = src.count(line, &rec[j + 1], sp)?;
                counts.set(i, j, c);
            }
        }
        OccurrenceMatrix::new(species, counts).map_err(|e| src.err(1, e.to_string()))
    }
}

pub fn load_pa(path: impl AsRef<Path>) -> Result<PaTable> {
    let mut src = CsvSource::open(path.as_ref())?;
    let header = src.header()?;
    if header != ["site_id", "species_id", "present"] {
        return Err(src.err(1, "presence-absence header must be `site_id,species_id,present`"));
    }
    let mut records = Vec::new();
    for (line, rec) in src.records()? {
        if rec.len() != 3 {
            return Err(src.err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let present = match &rec[2] {
            "1" => true,
            "0" => false,
            other => return Err(src.err(line, format!("`present` must be 0 or 1, got `{other}`"))),
        };
        records.push(PaRecord {
            site_id: rec[0].to_owned(),
            species_id: rec[1].to_owned(),
            present,
        });
    }
    Ok(PaTable { records })
}

pub fn load_grouping(path: impl AsRef<Path>) -> Result<Grouping> {
    let mut src = CsvSource::open(path.as_ref())?;
    let header = src.header()?;
    if header != ["species_id", "group", "region"] {
        return Err(src.err(1, "grouping header must be `species_id,group,region`"));
    }
    let mut g = Grouping::default();
    for (line, rec) in src.records()? {
        if rec.len() != 3 {
            return Err(src.err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        g.insert(&rec[0], &rec[1], &rec[2]);
    }
    Ok(g)
}

/// Sites with at least one record of any species.
pub fn select_tgb_sites(occ: &OccurrenceMatrix) -> Result<Vec<usize>> {
    tgb_subset(occ, &(0..occ.n_sites()).collect::<Vec<_>>())
}

/// Target-group background sites restricted to a candidate subset.
pub fn tgb_subset(occ: &OccurrenceMatrix, candidates: &[usize]) -> Result<Vec<usize>> {
    let totals = occ.site_totals();
    let selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| totals[i] > 0.0)
        .collect();
    if selected.is_empty() {
        return Err(Error::Validation(
            "no sampled sites: every site has zero occurrences".into(),
        ));
    }
    Ok(selected)
}

/// One epoch's batches: a seeded shuffle of `site_indices` cut into
/// consecutive chunks of `batch_size`. A trailing single site is merged into
/// the previous batch.
pub fn make_batches(
    site_indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    if site_indices.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "{} site(s) cannot form a batch",
            site_indices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order = site_indices.to_vec();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    Ok(batches)
}

/// Spatial blocks on a regular grid over the site bounding box, grouped into
/// cross-validation folds.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAssignment {
    pub grid_side: usize,
    pub folds: usize,
    /// Block of each site, `row * grid_side + col`.
    pub site_block: Vec<usize>,
    /// Fold (0-based) of each block.
    pub block_fold: Vec<usize>,
    /// Presence total of each fold.
    pub fold_presence: Vec<f64>,
}

impl BlockAssignment {
    pub fn site_fold(&self, site: usize) -> usize {
        self.block_fold[self.site_block[site]]
    }

    pub fn fold_sites(&self, fold: usize) -> Vec<usize> {
        (0..self.site_block.len())
            .filter(|&i| self.site_fold(i) == fold)
            .collect()
    }

    /// Largest fold presence total.
    pub fn max_fold_presence(&self) -> f64 {
        self.fold_presence.iter().copied().fold(0.0, f64::max)
    }
}

/// Grid cell of every site over the bounding box of `coords`.
pub fn grid_blocks(coords: &[[f64; 2]], grid_side: usize) -> Result<Vec<usize>> {
    if grid_side == 0 {
        return Err(Error::Config("grid side must be at least 1".into()));
    }
    if coords.is_empty() {
        return Err(Error::Validation("no sites to block".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if hi[0] == lo[0] && hi[1] == lo[1] {
        return Err(Error::Validation(
            "degenerate bounding box: all sites share the same coordinates".into(),
        ));
    }
    let cell = |v: f64, a: usize| -> usize {
        let extent = hi[a] - lo[a];
        if extent <= 0.0 {
            return 0;
        }
        let k = ((v - lo[a]) / extent * grid_side as f64).floor() as usize;
        k.min(grid_side - 1)
    };
    Ok(coords
        .iter()
        .map(|c| cell(c[1], 1) * grid_side + cell(c[0], 0))
        .collect())
}

/// Assigns grid blocks to folds. Nonempty blocks are visited in decreasing
/// order of presence (ties broken by a seeded shuffle) and each goes to the
/// fold with the smallest presence total so far, then fewest blocks.
pub fn assign_blocks(
    sites: &SiteTable,
    site_presence: &[f64],
    grid_side: usize,
    folds: usize,
    seed: u64,
) -> Result<BlockAssignment> {
    if site_presence.len() != sites.len() {
        return Err(Error::dim(
            "assign_blocks",
            format!("{} presence values for {} sites", site_presence.len(), sites.len()),
        ));
    }
    if folds == 0 {
        return Err(Error::Config("at least one fold is required".into()));
    }
    let site_block = grid_blocks(sites.coords(), grid_side)?;
    let n_blocks = grid_side * grid_side;
    let mut block_load = vec![0.0; n_blocks];
    let mut block_used = vec![false; n_blocks];
    for (i, &b) in site_block.iter().enumerate() {
        block_load[b] += site_presence[i];
        block_used[b] = true;
    }
    let nonempty: Vec<usize> = (0..n_blocks).filter(|&b| block_used[b]).collect();
    if folds > nonempty.len() {
        return Err(Error::Config(format!(
            "{folds} folds requested but only {} nonempty blocks",
            nonempty.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = nonempty;
    order.shuffle(&mut rng);
    order.sort_by(|a, b| block_load[*b].total_cmp(&block_load[*a]));

    let (block_fold, fold_presence) = greedy_fold_assignment(&order, &block_load, n_blocks, folds);
    Ok(BlockAssignment {
        grid_side,
        folds,
        site_block,
        block_fold,
        fold_presence,
    })
}

fn greedy_fold_assignment(
    order: &[usize],
    block_load: &[f64],
    n_blocks: usize,
    folds: usize,
) -> (Vec<usize>, Vec<f64>) {
    let mut fold_load = vec![0.0f64; folds];
    let mut fold_blocks = vec![0usize; folds];
    let mut block_fold = vec![usize::MAX; n_blocks];
    // empty blocks hold no sites; they are placed last so every block has a fold
    let empty = (0..n_blocks).filter(|b| !order.contains(b));
    for b in order.iter().copied().chain(empty) {
        let f = (0..folds)
            .min_by(|&x, &y| {
                fold_load[x]
                    .total_cmp(&fold_load[y])
                    .then(fold_blocks[x].cmp(&fold_blocks[y]))
                    .then(x.cmp(&y))
            })
            .unwrap_or(0);
        block_fold[b] = f;
        fold_load[f] += block_load[b];
        fold_blocks[f] += 1;
    }
    (block_fold, fold_load)
}
