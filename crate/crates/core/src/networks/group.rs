use super::backbone::{BackboneSpec, StudentBackbone};
use super::fusion::{ChannelAligner, FusionModule};
use super::params::ParamSet;
use super::sd::SelfDistillModule;
use crate::error::{Error, Result};
use crate::seeds;

/// Leader, common students, fusion module, aligner and one self-distillation
/// module per student.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentGroup {
    pub leader: StudentBackbone,
    /// Common students in chain order.
    pub students: Vec<StudentBackbone>,
    pub fusion: FusionModule,
    pub aligner: ChannelAligner,
    /// Index 0 belongs to the leader, index `i` to common student `i`.
    pub sd: Vec<SelfDistillModule>,
}

/// Archive name of each component, in a fixed order.
pub fn component_names(n: usize) -> Vec<String> {
    let mut names = vec!["leader".to_string()];
    names.extend((1..=n).map(|i| format!("student{i}")));
    names.push("fusion".into());
    names.push("aligner".into());
    names.extend((0..=n).map(|i| format!("sd{i}")));
    names
}

/// Builds `n` common students plus a leader with independent initial weights
/// drawn from streams derived from `seed`.
pub fn build_group(spec: &BackboneSpec, n: usize, seed: u64) -> Result<StudentGroup> {
    if n < 1 {
        return Err(Error::config("at least one common student is required"));
    }
    spec.validate()?;
    let leader = StudentBackbone::new(spec, &mut seeds::stream(seed, "init/leader"))?;
    let students = (1..=n)
        .map(|i| StudentBackbone::new(spec, &mut seeds::stream(seed, &format!("init/student{i}"))))
        .collect::<Result<Vec<_>>>()?;
    let (c, _, _) = spec.final_shape();
    let fusion = FusionModule::new(n, c, spec.classes, &mut seeds::stream(seed, "init/fusion"));
    let aligner = ChannelAligner::new(c, n, &mut seeds::stream(seed, "init/aligner"));
    let sd = (0..=n)
        .map(|i| SelfDistillModule::new(spec, &mut seeds::stream(seed, &format!("init/sd{i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudentGroup {
        leader,
        students,
        fusion,
        aligner,
        sd,
    })
}

impl StudentGroup {
    pub fn n(&self) -> usize {
        self.students.len()
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.leader.spec()
    }

    /// `(name, params)` for every component in [`component_names`] order.
    pub fn components(&self) -> Vec<(String, &ParamSet)> {
        let mut sets: Vec<&ParamSet> = vec![&self.leader.params];
        sets.extend(self.students.iter().map(|s| &s.params));
        sets.push(&self.fusion.params);
        sets.push(&self.aligner.params);
        sets.extend(self.sd.iter().map(|s| &s.params));
        component_names(self.n()).into_iter().zip(sets).collect()
    }

    pub fn components_mut(&mut self) -> Vec<(String, &mut ParamSet)> {
        let names = component_names(self.n());
        let mut sets: Vec<&mut ParamSet> = vec![&mut self.leader.params];
        sets.extend(self.students.iter_mut().map(|s| &mut s.params));
        sets.push(&mut self.fusion.params);
        sets.push(&mut self.aligner.params);
        sets.extend(self.sd.iter_mut().map(|s| &mut s.params));
        names.into_iter().zip(sets).collect()
    }
}
