//! Symbolic meaning of DAG nodes.
//!
//! Every decrypted aggregate denotes a linear combination of terms
//! `Σ{slot over clients in region}`. Calculate nodes build expressions over
//! those. Two lineages agree when their normalized expressions are equal;
//! normalization merges terms whose regions partition a larger region along
//! one categorical feature, so `S_prof + S_phd + S_other` equals `S_all`.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::BigRational;

use crate::calc::{BinOp, CalcExpr, CalcNum};
use crate::dag::{FaDag, OpKind, Slot};
use crate::planner::ir::{AnswerKey, CombineOp, Intent, QueryIR, SubQuery};
use crate::predicate::{Comparator, Literal, Predicate};
use crate::schema::{FeatureSpec, Schema};

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
struct FeatCons {
    /// Allowed categorical values; `None` means the whole domain.
    set: Option<BTreeSet<String>>,
    /// Opaque numeric comparisons, canonically rendered.
    atoms: BTreeSet<String>,
}

impl FeatCons {
    fn is_trivial(&self) -> bool {
        self.set.is_none() && self.atoms.is_empty()
    }
}

/// Set of clients selected by a predicate, normalized against the schema.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Region {
    cons: BTreeMap<String, FeatCons>,
}

impl Region {
    pub fn is_empty(&self) -> bool {
        self.cons
            .values()
            .any(|c| c.set.as_ref().is_some_and(BTreeSet::is_empty))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlotKey {
    Value(String),
    One,
}

pub type Lin = BTreeMap<(SlotKey, Region), i64>;

#[derive(Debug, Clone, PartialEq)]
pub enum Sym {
    Lin(Lin),
    Const(BigRational),
    Neg(Box<Sym>),
    Bin(BinOp, Box<Sym>, Box<Sym>),
}

pub struct Semantics<'a> {
    schema: &'a Schema,
}

impl<'a> Semantics<'a> {
    pub fn new(schema: &'a Schema) -> Self {
        Self { schema }
    }

    fn domain(&self, feature: &str) -> Option<&'a [String]> {
        match self.schema.get(feature).ok()? {
            FeatureSpec::Categorical { values } => Some(values),
            FeatureSpec::Numeric { .. } => None,
        }
    }

    fn normalize_cons(&self, feature: &str, mut c: FeatCons) -> FeatCons {
        if let (Some(set), Some(domain)) = (&c.set, self.domain(feature)) {
            if set.len() == domain.len() && domain.iter().all(|v| set.contains(v)) {
                c.set = None;
            }
        }
        c
    }

    pub fn region(&self, pred: &Predicate) -> Result<Region, String> {
        let mut region = Region::default();
        for atom in pred.atoms() {
            let mut c = FeatCons::default();
            match self.domain(&atom.feature) {
                Some(domain) => {
                    let listed: BTreeSet<String> = atom
                        .values()
                        .iter()
                        .map(|l| match l {
                            Literal::Str(s) => s.clone(),
                            Literal::Num(x) => x.to_string(),
                        })
                        .collect();
                    let set: BTreeSet<String> = match atom.op {
                        Comparator::Eq | Comparator::In => {
                            domain.iter().filter(|v| listed.contains(*v)).cloned().collect()
                        }
                        Comparator::Ne | Comparator::NotIn => {
                            domain.iter().filter(|v| !listed.contains(*v)).cloned().collect()
                        }
                        op => {
                            return Err(format!(
                                "comparator `{}` on categorical feature `{}`",
                                op.symbol(),
                                atom.feature
                            ))
                        }
                    };
                    c.set = Some(set);
                }
                None => {
                    if !self.schema.contains(&atom.feature) {
                        return Err(format!("unknown feature `{}`", atom.feature));
                    }
                    c.atoms.insert(Predicate::atom(atom.clone()).canonical());
                }
            }
            let merged = intersect(region.cons.remove(&atom.feature).unwrap_or_default(), c);
            region.cons.insert(atom.feature.clone(), merged);
        }
        Ok(self.finish(region))
    }

    fn finish(&self, mut region: Region) -> Region {
        let cons = std::mem::take(&mut region.cons);
        for (f, c) in cons {
            let c = self.normalize_cons(&f, c);
            if !c.is_trivial() {
                region.cons.insert(f, c);
            }
        }
        region
    }

    pub fn and(&self, a: &Region, b: &Region) -> Region {
        let mut out = a.clone();
        for (f, c) in &b.cons {
            let merged = intersect(out.cons.remove(f).unwrap_or_default(), c.clone());
            out.cons.insert(f.clone(), merged);
        }
        self.finish(out)
    }

    /// Union of two regions that differ only in one feature's categorical
    /// set, when those sets are disjoint.
    fn disjoint_union(&self, a: &Region, b: &Region) -> Option<Region> {
        let features: BTreeSet<&String> = a.cons.keys().chain(b.cons.keys()).collect();
        let empty = FeatCons::default();
        let mut differing = features
            .into_iter()
            .filter(|f| a.cons.get(*f).unwrap_or(&empty) != b.cons.get(*f).unwrap_or(&empty));
        let f = differing.next()?;
        if differing.next().is_some() {
            return None;
        }
        let ca = a.cons.get(f).unwrap_or(&empty);
        let cb = b.cons.get(f).unwrap_or(&empty);
        if ca.atoms != cb.atoms {
            return None;
        }
        let (sa, sb) = (ca.set.as_ref()?, cb.set.as_ref()?);
        if !sa.is_disjoint(sb) {
            return None;
        }
        let mut out = a.clone();
        let c = FeatCons {
            set: Some(sa.union(sb).cloned().collect()),
            atoms: ca.atoms.clone(),
        };
        out.cons.insert(f.clone(), c);
        Some(self.finish(out))
    }

    /// When `child` narrows `parent` on exactly one categorical feature and
    /// agrees everywhere else: that feature with both value sets.
    pub fn narrowing(&self, parent: &Region, child: &Region) -> Option<(String, BTreeSet<String>, BTreeSet<String>)> {
        let features: BTreeSet<&String> = parent.cons.keys().chain(child.cons.keys()).collect();
        let empty = FeatCons::default();
        let mut differing = features
            .into_iter()
            .filter(|f| parent.cons.get(*f).unwrap_or(&empty) != child.cons.get(*f).unwrap_or(&empty));
        let f = differing.next()?;
        if differing.next().is_some() {
            return None;
        }
        let domain = self.domain(f)?;
        let (cp, cc) = (parent.cons.get(f).unwrap_or(&empty), child.cons.get(f)?);
        if cp.atoms != cc.atoms {
            return None;
        }
        let ps = cp.set.clone().unwrap_or_else(|| domain.iter().cloned().collect());
        let cs = cc.set.clone()?;
        (!cs.is_empty() && cs.len() < ps.len() && cs.is_subset(&ps)).then(|| (f.clone(), ps, cs))
    }

    pub fn term(&self, slot: &Slot, region: &Region) -> Result<Lin, String> {
        let (key, region) = match slot {
            Slot::Value(f) => (SlotKey::Value(f.clone()), region.clone()),
            Slot::Indicator => (SlotKey::One, region.clone()),
            Slot::Flag(cond) => (SlotKey::One, self.and(region, &self.region(cond)?)),
        };
        let mut lin = Lin::new();
        lin.insert((key, region), 1);
        Ok(self.normalize(lin))
    }

    pub fn normalize(&self, lin: Lin) -> Lin {
        let mut lin: Lin = lin.into_iter().filter(|((_, r), c)| *c != 0 && !r.is_empty()).collect();
        'outer: loop {
            let entries: Vec<((SlotKey, Region), i64)> = lin.iter().map(|(k, v)| (k.clone(), *v)).collect();
            for i in 0..entries.len() {
                for j in i + 1..entries.len() {
                    let ((si, ri), ci) = &entries[i];
                    let ((sj, rj), cj) = &entries[j];
                    if si != sj || ci != cj {
                        continue;
                    }
                    if let Some(u) = self.disjoint_union(ri, rj) {
                        lin.remove(&entries[i].0);
                        lin.remove(&entries[j].0);
                        *lin.entry((si.clone(), u)).or_insert(0) += ci;
                        lin.retain(|_, c| *c != 0);
                        continue 'outer;
                    }
                }
            }
            return lin;
        }
    }

    pub fn add(&self, a: Sym, b: Sym) -> Sym {
        match (a, b) {
            (Sym::Lin(mut x), Sym::Lin(y)) => {
                for (k, c) in y {
                    *x.entry(k).or_insert(0) += c;
                }
                Sym::Lin(self.normalize(x))
            }
            (a, b) => Sym::Bin(BinOp::Add, Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(&self, a: Sym) -> Sym {
        match a {
            Sym::Lin(x) => Sym::Lin(x.into_iter().map(|(k, c)| (k, -c)).collect()),
            Sym::Const(c) => Sym::Const(-c),
            other => Sym::Neg(Box::new(other)),
        }
    }

    pub fn sub(&self, a: Sym, b: Sym) -> Sym {
        match (a, b) {
            (a @ Sym::Lin(_), b @ Sym::Lin(_)) => {
                let nb = self.neg(b);
                self.add(a, nb)
            }
            (a, b) => Sym::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
        }
    }

    pub fn div(&self, a: Sym, b: Sym) -> Sym {
        Sym::Bin(BinOp::Div, Box::new(a), Box::new(b))
    }

    fn bin(&self, op: BinOp, a: Sym, b: Sym) -> Sym {
        match op {
            BinOp::Add => self.add(a, b),
            BinOp::Sub => self.sub(a, b),
            BinOp::Mul => Sym::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
            BinOp::Div => self.div(a, b),
        }
    }

    fn eval_expr(&self, e: &CalcExpr, env: &BTreeMap<String, Sym>) -> Option<Sym> {
        Some(match e {
            CalcExpr::Num(n) => Sym::Const(BigRational::from_decimal(n)),
            CalcExpr::Var(v) => env.get(v)?.clone(),
            CalcExpr::Neg(x) => self.neg(self.eval_expr(x, env)?),
            CalcExpr::Bin(op, a, b) => self.bin(*op, self.eval_expr(a, env)?, self.eval_expr(b, env)?),
        })
    }

    /// Symbolic value of every Aggregate, NoiseAdd, Decrypt and Calculate
    /// node whose lineage is resolvable.
    pub fn dag_values(&self, dag: &FaDag) -> BTreeMap<String, Sym> {
        let mut env: BTreeMap<String, Sym> = BTreeMap::new();
        for id in dag.topo_order() {
            let node = dag.node(&id).unwrap();
            let value = match node.kind {
                OpKind::Access | OpKind::Encrypt => None,
                OpKind::Aggregate => {
                    let mut acc = Some(Lin::new());
                    for e in dag.predecessors(&id) {
                        let term = dag.node(e).and_then(|enc| {
                            let slot = enc.encrypted_slot()?;
                            let mut accesses = dag
                                .predecessors(e)
                                .filter_map(|a| dag.node(a))
                                .filter(|a| a.kind == OpKind::Access);
                            let access = accesses.next()?;
                            if accesses.next().is_some() {
                                return None;
                            }
                            let region = self.region(access.predicate.as_ref()?).ok()?;
                            self.term(slot, &region).ok()
                        });
                        acc = match (acc, term) {
                            (Some(mut a), Some(t)) => {
                                for (k, c) in t {
                                    *a.entry(k).or_insert(0) += c;
                                }
                                Some(a)
                            }
                            _ => None,
                        };
                    }
                    acc.map(|a| Sym::Lin(self.normalize(a)))
                }
                OpKind::NoiseAdd | OpKind::Decrypt => {
                    let mut preds = dag.predecessors(&id);
                    match (preds.next(), preds.next()) {
                        (Some(p), None) => env.get(p).cloned(),
                        _ => None,
                    }
                }
                OpKind::Calculate => node.calc_expr.as_ref().and_then(|e| self.eval_expr(e, &env)),
            };
            if let Some(v) = value {
                env.insert(id, v);
            }
        }
        env
    }

    fn measure(&self, intent: Intent, sub: &SubQuery, scope: &Region) -> Result<Sym, String> {
        let lin = |slot: Slot, region: &Region| self.term(&slot, region).map(Sym::Lin);
        let feature = || sub.feature.clone().ok_or_else(|| format!("{intent} without a feature"));
        Ok(match intent {
            Intent::Count => lin(Slot::Indicator, scope)?,
            Intent::Sum => lin(Slot::Value(feature()?), scope)?,
            Intent::Mean => self.div(lin(Slot::Value(feature()?), scope)?, lin(Slot::Indicator, scope)?),
            Intent::Percentage => {
                let cond = sub
                    .condition
                    .clone()
                    .ok_or_else(|| "Percentage without a condition".to_string())?;
                self.div(lin(Slot::Flag(cond), scope)?, lin(Slot::Indicator, scope)?)
            }
            Intent::Ratio => {
                let den = sub
                    .denominator
                    .clone()
                    .ok_or_else(|| "Ratio without a denominator".to_string())?;
                self.div(lin(Slot::Value(feature()?), scope)?, lin(Slot::Value(den), scope)?)
            }
            Intent::Comparison | Intent::GroupBy => return Err(format!("{intent} is not a basic measure")),
        })
    }

    /// The symbolic value each required answer must have.
    pub fn expected(&self, ir: &QueryIR) -> Result<Vec<(AnswerKey, Sym)>, String> {
        let mut per_query: BTreeMap<usize, Sym> = BTreeMap::new();
        let mut out = Vec::new();
        for (i, sub) in ir.subqueries.iter().enumerate() {
            let scope = self.region(&sub.filter)?;
            match sub.intent {
                Intent::Comparison => {
                    let m = sub.basic_intent();
                    let sides = sub.compare.as_ref().ok_or("Comparison without sides")?;
                    let a = self.measure(m, sub, &self.and(&scope, &self.region(&sides[0])?))?;
                    let b = self.measure(m, sub, &self.and(&scope, &self.region(&sides[1])?))?;
                    let diff = self.sub(a.clone(), b.clone());
                    out.push((AnswerKey::Side(i, 0), a));
                    out.push((AnswerKey::Side(i, 1), b));
                    out.push((AnswerKey::Query(i), diff.clone()));
                    per_query.insert(i, diff);
                }
                Intent::GroupBy => {
                    let m = sub.basic_intent();
                    for (g, group) in sub.groups.iter().enumerate() {
                        let r = self.and(&scope, &self.region(&group.predicate)?);
                        out.push((AnswerKey::Group(i, g), self.measure(m, sub, &r)?));
                    }
                }
                basic => {
                    let v = self.measure(basic, sub, &scope)?;
                    per_query.insert(i, v.clone());
                    out.push((AnswerKey::Query(i), v));
                }
            }
        }
        for (k, c) in ir.final_combine.iter().enumerate() {
            let get = |r: usize| {
                per_query
                    .get(&(r - 1))
                    .cloned()
                    .ok_or_else(|| format!("final_combine[{k}] references sub-query {r}"))
            };
            let (l, r) = (get(c.left)?, get(c.right)?);
            let v = match c.op {
                CombineOp::Diff => self.sub(l, r),
                CombineOp::Ratio => self.div(l, r),
            };
            out.push((AnswerKey::Combine(k), v));
        }
        Ok(out)
    }
}

fn intersect(a: FeatCons, b: FeatCons) -> FeatCons {
    let set = match (a.set, b.set) {
        (None, s) | (s, None) => s,
        (Some(x), Some(y)) => Some(x.intersection(&y).cloned().collect()),
    };
    let mut atoms = a.atoms;
    atoms.extend(b.atoms);
    FeatCons { set, atoms }
}

/// For each required answer, the first answer node whose lineage computes it.
pub fn answer_map(dag: &FaDag, ir: &QueryIR) -> Result<Vec<(AnswerKey, Option<String>)>, String> {
    let sem = Semantics::new(ir.schema());
    let values = sem.dag_values(dag);
    let expected = sem.expected(ir)?;
    Ok(expected
        .into_iter()
        .map(|(key, want)| {
            let hit = dag
                .answer_nodes()
                .iter()
                .find(|a| values.get(*a) == Some(&want))
                .cloned();
            (key, hit)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::Atom;

    fn schema() -> Schema {
        Schema::from_json(
            r#"{"role": {"type": "categorical", "values": ["professor", "phd", "masters", "staff"]},
                "salary": {"type": "numeric", "bounds": [0, 300]}}"#,
        )
        .unwrap()
    }

    fn role(v: &str) -> Predicate {
        Predicate::atom(Atom::eq("role", v))
    }

    fn not_in(vs: &[&str]) -> Predicate {
        Predicate::atom(Atom::set(
            "role",
            Comparator::NotIn,
            vs.iter().map(|v| Literal::Str(v.to_string())).collect(),
        ))
    }

    #[test]
    fn partition_sums_collapse_to_the_whole() {
        let s = schema();
        let sem = Semantics::new(&s);
        let slot = Slot::Value("salary".into());
        let mut parts = Lin::new();
        for p in [role("professor"), role("phd"), not_in(&["professor", "phd"])] {
            for (k, c) in sem.term(&slot, &sem.region(&p).unwrap()).unwrap() {
                parts.insert(k, c);
            }
        }
        let whole = sem.term(&slot, &sem.region(&Predicate::always()).unwrap()).unwrap();
        assert_eq!(sem.normalize(parts), whole);
    }

    #[test]
    fn overlapping_terms_do_not_merge() {
        let s = schema();
        let sem = Semantics::new(&s);
        let grad = Predicate::atom(Atom::set(
            "role",
            Comparator::In,
            vec![Literal::Str("phd".into()), Literal::Str("masters".into())],
        ));
        let a = sem.term(&Slot::Indicator, &sem.region(&grad).unwrap()).unwrap();
        let b = sem.term(&Slot::Indicator, &sem.region(&role("phd")).unwrap()).unwrap();
        let Sym::Lin(sum) = sem.add(Sym::Lin(a), Sym::Lin(b)) else {
            panic!()
        };
        assert_eq!(sum.len(), 2);
    }

    #[test]
    fn remainder_of_a_subset_is_its_complement_within() {
        let s = schema();
        let sem = Semantics::new(&s);
        let grad = Predicate::atom(Atom::set(
            "role",
            Comparator::In,
            vec![Literal::Str("phd".into()), Literal::Str("masters".into())],
        ));
        let rest = grad.and(&not_in(&["phd"]));
        assert_eq!(sem.region(&rest).unwrap(), sem.region(&role("masters")).unwrap());
    }

    #[test]
    fn flag_slot_is_an_indicator_over_the_conjunction() {
        let s = schema();
        let sem = Semantics::new(&s);
        let all = sem.region(&Predicate::always()).unwrap();
        let flag = sem.term(&Slot::Flag(role("phd")), &all).unwrap();
        let direct = sem.term(&Slot::Indicator, &sem.region(&role("phd")).unwrap()).unwrap();
        assert_eq!(flag, direct);
    }
}
