//! Synthetic superpoll: a known generating model over states and demographic cells.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_delimited, AltCovariate, CategorySet, Column, FactorColumn, PostStratFrame, QuestionSpec, SurveyTable, Table,
};
use crate::error::{Error, Result};
use crate::poststrat::{qoi_from_joint, softmax, QoiReport};

pub const GEOGRAPHY: &str = "state";
pub const DIVISION: &str = "division";
pub const COPART: &str = "lag_copart";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_geographies: usize,
    pub n_divisions: usize,
    pub questions: Vec<QuestionSpec>,
    /// Demographic factors and their level counts.
    pub demographics: Vec<(String, usize)>,
    /// Scale of the joint intercepts linking the questions; 0 makes them independent.
    pub association: f64,
    /// SD of per-question demographic and state effects.
    pub main_sd: f64,
    /// SD of joint-category (cross-question) demographic and state effects.
    pub interaction_sd: f64,
    /// SD of division-by-category effects.
    pub division_sd: f64,
    /// Per-question slope SD for the state-level contextual covariates.
    pub slope_sd: f64,
    /// Weight of the lagged copartisanship signal in the state-by-party effect.
    pub copart_signal: f64,
    /// SD of the state-by-party effect not explained by the lagged signal.
    pub copart_residual_sd: f64,
    /// Multiplies every effect; 0 gives a uniform joint everywhere.
    pub effect_scale: f64,
    /// Lognormal SD of state population sizes.
    pub population_sd: f64,
    /// Log selection propensity spread across the levels of the first demographic;
    /// nonzero makes samples unrepresentative and attaches inverse-propensity weights.
    pub sampling_bias: f64,
    pub superpoll_size: usize,
    pub sample_size: usize,
    pub replications: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_geographies: 50,
            n_divisions: 9,
            questions: vec![
                QuestionSpec::new("party", &["D", "R", "I"]).expect("static spec"),
                QuestionSpec::new("policy", &["yes", "no"]).expect("static spec"),
            ],
            demographics: vec![("race".into(), 4), ("educ".into(), 4), ("age".into(), 4), ("gender".into(), 2)],
            association: 0.8,
            main_sd: 0.4,
            interaction_sd: 0.25,
            division_sd: 0.2,
            slope_sd: 0.3,
            copart_signal: 0.6,
            copart_residual_sd: 0.15,
            effect_scale: 1.0,
            population_sd: 0.8,
            sampling_bias: 0.0,
            superpoll_size: 150_000,
            sample_size: 2_000,
            replications: 50,
            seed: 1,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_geographies", self.n_geographies),
            ("n_divisions", self.n_divisions),
            ("superpoll_size", self.superpoll_size),
            ("sample_size", self.sample_size),
            ("replications", self.replications),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator `{name}` must be positive")));
        }
        if self.sample_size > self.superpoll_size {
            return Err(Error::Config("sample_size exceeds superpoll_size".into()));
        }
        if self.questions.is_empty() {
            return Err(Error::Config("generator needs at least one question".into()));
        }
        for (name, n) in &self.demographics {
            if *n == 0 {
                return Err(Error::Config(format!("demographic `{name}` needs at least one level")));
            }
        }
        let sds = [
            self.association,
            self.main_sd,
            self.interaction_sd,
            self.division_sd,
            self.slope_sd,
            self.copart_signal,
            self.copart_residual_sd,
            self.effect_scale,
            self.population_sd,
            self.sampling_bias,
        ];
        if sds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("generator scales must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> Result<CategorySet> {
        CategorySet::new(self.questions.clone())
    }

    /// The first question plays the role of party identification.
    pub fn party_question(&self) -> &str {
        &self.questions[0].name
    }
}

/// Which ground truth the validation compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TruthKind {
    /// Cell probabilities of the generating model, weighted by population.
    #[default]
    Generative,
    /// Weighted disaggregation of the finite superpoll.
    Superpoll,
}

#[derive(Debug, Clone)]
pub struct Superpoll {
    pub spec: GeneratorSpec,
    pub categories: CategorySet,
    pub survey: SurveyTable,
    pub frame: PostStratFrame,
    pub alts: Vec<AltCovariate>,
    /// Generating joint for every frame cell.
    pub cell_joint: Vec<Vec<f64>>,
    pub generative_truth: QoiReport,
    pub superpoll_truth: QoiReport,
}

impl Superpoll {
    pub fn truth(&self, kind: TruthKind) -> &QoiReport {
        match kind {
            TruthKind::Generative => &self.generative_truth,
            TruthKind::Superpoll => &self.superpoll_truth,
        }
    }

    /// Rows `rows` of the superpoll as a survey.
    pub fn subsample(&self, rows: &[usize]) -> SurveyTable {
        SurveyTable {
            table: self.survey.table.gather(rows),
            case_ids: rows.iter().map(|&r| self.survey.case_ids[r].clone()).collect(),
            weights: self.survey.weights.as_ref().map(|w| rows.iter().map(|&r| w[r]).collect()),
            dropped_rows: 0,
        }
    }

    /// Selection propensity of each superpoll respondent.
    fn propensities(&self) -> Option<Vec<f64>> {
        let (name, n) = self.spec.demographics.first()?;
        if self.spec.sampling_bias == 0.0 {
            return None;
        }
        let Ok(Column::Factor(f)) = self.survey.table.column(name) else { return None };
        let span = (*n as f64 - 1.0).max(1.0);
        Some(f.codes.iter().map(|&c| (self.spec.sampling_bias * (c as f64 / span - 0.5)).exp()).collect())
    }

    /// Draws `sample_size` respondents without replacement on the stream of `replication`.
    /// Under `sampling_bias` the draw is propensity-weighted and the sample carries
    /// inverse-propensity weights normalized to mean one.
    pub fn sample(&self, replication: u64) -> SurveyTable {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(replication + 1);
        let n = self.survey.n_cases();
        let Some(prop) = self.propensities() else {
            let mut rows = rand::seq::index::sample(&mut rng, n, self.spec.sample_size).into_vec();
            rows.sort_unstable();
            return self.subsample(&rows);
        };
        let mut rows = rand::seq::index::sample_weighted(&mut rng, n, |i| prop[i], self.spec.sample_size)
            .expect("propensities are positive and finite")
            .into_vec();
        rows.sort_unstable();
        let mut out = self.subsample(&rows);
        let inv: Vec<f64> = rows.iter().map(|&r| 1.0 / prop[r]).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        out.weights = Some(inv.into_iter().map(|w| w / mean).collect());
        out
    }
}

fn table_rows(t: &Table, ids: &[String], extra: &[(&str, Vec<String>)]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["id".to_string()];
    header.extend(t.names().iter().cloned());
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    let rows = (0..t.n_rows())
        .map(|r| {
            let mut row = vec![ids[r].clone()];
            row.extend(t.columns().map(|(_, c)| c.key(r)));
            row.extend(extra.iter().map(|(_, v)| v[r].clone()));
            row
        })
        .collect();
    (header, rows)
}

impl Superpoll {
    /// Writes `survey.csv` (the sample of `replication`), `frame.csv`, `lag_copart.csv`,
    /// and the truth as `truth.csv` into `dir`.
    pub fn export(&self, dir: &Path, replication: u64, truth: TruthKind) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sample = self.sample(replication);
        let extra: Vec<(&str, Vec<String>)> = match &sample.weights {
            Some(w) => vec![("weight", w.iter().map(|x| x.to_string()).collect())],
            None => Vec::new(),
        };
        let (h, rows) = table_rows(&sample.table, &sample.case_ids, &extra);
        write_delimited(&dir.join("survey.csv"), &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
        let w: Vec<String> = self.frame.weights.iter().map(|x| x.to_string()).collect();
        let (h, rows) = table_rows(&self.frame.table, &self.frame.cell_ids, &[("weight", w)]);
        write_delimited(&dir.join("frame.csv"), &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
        for alt in &self.alts {
            let mut header: Vec<&str> = alt.keys.iter().map(String::as_str).collect();
            header.push(&alt.question);
            header.push("value");
            let rows: Vec<Vec<String>> = alt
                .values
                .iter()
                .map(|((key, level), v)| {
                    let mut r = key.clone();
                    r.push(level.clone());
                    r.push(v.to_string());
                    r
                })
                .collect();
            write_delimited(&dir.join(format!("{}.csv", alt.name)), &header, &rows)?;
        }
        self.truth(truth).write_csv(&dir.join("truth.csv"))
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    if sd == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, sd).expect("finite sd");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn level_names(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Effects of one grouping factor on each joint category: per-question main
/// effects plus a joint interaction.
struct FactorEffects {
    /// `[level][category]`.
    by_category: Vec<Vec<f64>>,
}

impl FactorEffects {
    fn draw(rng: &mut ChaCha8Rng, n_levels: usize, cats: &CategorySet, main_sd: f64, inter_sd: f64) -> Self {
        let main: Vec<Vec<f64>> = cats.questions.iter().map(|q| normals(rng, n_levels * q.levels.len(), main_sd)).collect();
        let inter = normals(rng, n_levels * cats.len(), inter_sd);
        let by_category = (0..n_levels)
            .map(|l| {
                (0..cats.len())
                    .map(|c| {
                        let m: f64 = cats
                            .questions
                            .iter()
                            .enumerate()
                            .map(|(q, spec)| main[q][l * spec.levels.len() + cats.component(c, q)])
                            .sum();
                        m + inter[l * cats.len() + c]
                    })
                    .collect()
            })
            .collect();
        FactorEffects { by_category }
    }
}

/// Builds the superpoll, post-stratification frame, and both truths.
pub fn generate_superpoll(spec: &GeneratorSpec) -> Result<Superpoll> {
    spec.validate()?;
    let cats = spec.categories()?;
    let l_bar = cats.len();
    let g = spec.n_geographies;
    let s = spec.effect_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);

    let states = level_names("S", g);
    let divisions = level_names("V", spec.n_divisions);
    let division_of: Vec<usize> = (0..g).map(|i| i % spec.n_divisions).collect();
    let demvote = normals(&mut rng, g, 1.0);
    let evang = normals(&mut rng, g, 1.0);

    // Joint intercepts: the first two questions are linked along the diagonal.
    let assoc: Vec<f64> = (0..l_bar)
        .map(|c| {
            if cats.questions.len() < 2 {
                return 0.0;
            }
            let (a, b) = (cats.component(c, 0), cats.component(c, 1));
            let (na, nb) = (cats.questions[0].levels.len(), cats.questions[1].levels.len());
            if a + 1 == na && na > 2 {
                0.0
            } else if a % nb == b {
                spec.association
            } else {
                -spec.association
            }
        })
        .collect();
    let base: Vec<f64> = {
        let q0: Vec<f64> = normals(&mut rng, cats.questions[0].levels.len(), 0.3);
        (0..l_bar).map(|c| q0[cats.component(c, 0)] + assoc[c]).collect()
    };

    let state_fx = FactorEffects::draw(&mut rng, g, &cats, spec.main_sd, spec.interaction_sd);
    let division_fx = FactorEffects::draw(&mut rng, spec.n_divisions, &cats, 0.0, spec.division_sd);
    let demo_fx: Vec<FactorEffects> = spec
        .demographics
        .iter()
        .map(|(_, n)| FactorEffects::draw(&mut rng, *n, &cats, spec.main_sd, spec.interaction_sd))
        .collect();
    let slopes: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let per_q: Vec<Vec<f64>> = cats.questions.iter().map(|q| normals(&mut rng, q.levels.len(), spec.slope_sd)).collect();
            (0..l_bar).map(|c| (0..cats.questions.len()).map(|q| per_q[q][cats.component(c, q)]).sum()).collect()
        })
        .collect();

    // Lagged copartisanship per (state, first-question level) and the state-by-party
    // effect it partly explains.
    let n_party = cats.questions[0].levels.len();
    let lag: Vec<f64> = normals(&mut rng, g * n_party, 1.0);
    let resid = normals(&mut rng, g * n_party, spec.copart_residual_sd);
    let party_fx = |st: usize, c: usize| {
        let k = st * n_party + cats.component(c, 0);
        spec.copart_signal * lag[k] + resid[k]
    };

    // Population: state sizes, then per-state demographic shares.
    let pop = normals(&mut rng, g, spec.population_sd).into_iter().map(f64::exp).collect::<Vec<_>>();
    let share_dist = Gamma::new(4.0, 1.0).expect("valid gamma");
    let shares: Vec<Vec<Vec<f64>>> = (0..g)
        .map(|_| {
            spec.demographics
                .iter()
                .map(|(_, n)| {
                    let raw: Vec<f64> = (0..*n).map(|_| share_dist.sample(&mut rng)).collect();
                    let t: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / t).collect()
                })
                .collect()
        })
        .collect();

    // Cells: state × every demographic combination, last demographic fastest.
    let demo_sizes: Vec<usize> = spec.demographics.iter().map(|(_, n)| *n).collect();
    let per_state: usize = demo_sizes.iter().product();
    let n_cells = g * per_state;
    let mut cell_state = Vec::with_capacity(n_cells);
    let mut cell_demo: Vec<Vec<u32>> = vec![Vec::with_capacity(n_cells); demo_sizes.len()];
    let mut weights = Vec::with_capacity(n_cells);
    let mut cell_joint = Vec::with_capacity(n_cells);
    for st in 0..g {
        for idx in 0..per_state {
            let mut rem = idx;
            let mut levels = vec![0usize; demo_sizes.len()];
            for d in (0..demo_sizes.len()).rev() {
                levels[d] = rem % demo_sizes[d];
                rem /= demo_sizes[d];
            }
            let w: f64 = pop[st] * levels.iter().enumerate().map(|(d, &l)| shares[st][d][l]).product::<f64>();
            let psi: Vec<f64> = (0..l_bar)
                .map(|c| {
                    let mut v = base[c]
                        + state_fx.by_category[st][c]
                        + division_fx.by_category[division_of[st]][c]
                        + party_fx(st, c)
                        + slopes[0][c] * demvote[st]
                        + slopes[1][c] * evang[st];
                    for (d, &l) in levels.iter().enumerate() {
                        v += demo_fx[d].by_category[l][c];
                    }
                    s * v
                })
                .collect();
            cell_state.push(st as u32);
            for (d, &l) in levels.iter().enumerate() {
                cell_demo[d].push(l as u32);
            }
            weights.push(w);
            cell_joint.push(softmax(&psi));
        }
    }

    let covariates = |rows_state: &[u32], rows_demo: &[Vec<u32>]| -> Result<Table> {
        let n = rows_state.len();
        let mut t = Table::new(n);
        t.insert(GEOGRAPHY, Column::Factor(FactorColumn { codes: rows_state.to_vec(), levels: states.clone() }))?;
        t.insert(
            DIVISION,
            Column::Factor(FactorColumn {
                codes: rows_state.iter().map(|&s| division_of[s as usize] as u32).collect(),
                levels: divisions.clone(),
            }),
        )?;
        for (d, (name, n_lv)) in spec.demographics.iter().enumerate() {
            t.insert(
                name.clone(),
                Column::Factor(FactorColumn { codes: rows_demo[d].clone(), levels: level_names(name, *n_lv) }),
            )?;
        }
        t.insert("demvote", Column::Numeric(rows_state.iter().map(|&s| demvote[s as usize]).collect()))?;
        t.insert("evang", Column::Numeric(rows_state.iter().map(|&s| evang[s as usize]).collect()))?;
        Ok(t)
    };

    let frame_table = covariates(&cell_state, &cell_demo)?;
    let cell_ids: Vec<String> = (0..n_cells).map(|i| format!("cell{i:06}")).collect();
    let geographies: Vec<String> = cell_state.iter().map(|&s| states[s as usize].clone()).collect();
    let frame = PostStratFrame::new(frame_table, cell_ids, geographies, weights.clone())?;

    // Superpoll respondents: cell by population weight, answers from the cell's joint.
    let cell_pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("population weights: {e}")))?;
    let mut sp_cell = Vec::with_capacity(spec.superpoll_size);
    let mut sp_cat = Vec::with_capacity(spec.superpoll_size);
    for _ in 0..spec.superpoll_size {
        let cell = cell_pick.sample(&mut rng);
        let u: f64 = rng.random();
        let joint = &cell_joint[cell];
        let mut acc = 0.0;
        let mut cat = l_bar - 1;
        for (c, p) in joint.iter().enumerate() {
            acc += p;
            if u < acc {
                cat = c;
                break;
            }
        }
        sp_cell.push(cell);
        sp_cat.push(cat);
    }
    let sp_state: Vec<u32> = sp_cell.iter().map(|&c| cell_state[c]).collect();
    let sp_demo: Vec<Vec<u32>> = cell_demo.iter().map(|col| sp_cell.iter().map(|&c| col[c]).collect()).collect();
    let mut sp_table = covariates(&sp_state, &sp_demo)?;
    for (q, qs) in cats.questions.iter().enumerate() {
        let codes = sp_cat.iter().map(|&c| cats.component(c, q) as u32).collect();
        sp_table.insert(qs.name.clone(), Column::Factor(FactorColumn { codes, levels: qs.levels.clone() }))?;
    }
    let survey = SurveyTable {
        table: sp_table,
        case_ids: (0..spec.superpoll_size).map(|i| format!("r{i:06}")).collect(),
        weights: None,
        dropped_rows: 0,
    };

    let mut copart = AltCovariate::new(COPART, &[GEOGRAPHY], spec.party_question());
    for st in 0..g {
        for (k, level) in cats.questions[0].levels.iter().enumerate() {
            copart.insert(&[states[st].as_str()], level, lag[st * n_party + k]);
        }
    }

    let generative_truth = {
        let mut acc = vec![vec![0.0; l_bar]; g];
        let mut tot = vec![0.0; g];
        for c in 0..n_cells {
            let st = cell_state[c] as usize;
            tot[st] += weights[c];
            for (a, p) in acc[st].iter_mut().zip(&cell_joint[c]) {
                *a += weights[c] * p;
            }
        }
        report(&states, acc, &tot, &cats)
    };
    let superpoll_truth = {
        let mut acc = vec![vec![0.0; l_bar]; g];
        let mut tot = vec![0.0; g];
        for (st, &c) in sp_state.iter().zip(&sp_cat) {
            acc[*st as usize][c] += 1.0;
            tot[*st as usize] += 1.0;
        }
        report(&states, acc, &tot, &cats)
    };

    Ok(Superpoll {
        spec: spec.clone(),
        categories: cats,
        survey,
        frame,
        alts: vec![copart],
        cell_joint,
        generative_truth,
        superpoll_truth,
    })
}

fn report(states: &[String], acc: Vec<Vec<f64>>, tot: &[f64], cats: &CategorySet) -> QoiReport {
    let mut geographies: Vec<_> = acc
        .into_iter()
        .zip(tot)
        .zip(states)
        .filter(|((_, t), _)| **t > 0.0)
        .map(|((a, t), name)| qoi_from_joint(name, a.into_iter().map(|v| v / t).collect(), cats))
        .collect();
    geographies.sort_by(|a, b| a.geography.cmp(&b.geography));
    QoiReport { categories: cats.clone(), geographies }
}
