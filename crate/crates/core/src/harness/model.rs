//! The dual-branch network: flow estimate feeds the change branch.

use crate::cd_branch::CdBranch;
use crate::domain::{BitemporalSample, ChangeMask, FlowField, Image, MaskKind};
use crate::error::Result;
use crate::nn::{init_rng, Graph, ParamBuilder, ParamStore, Var};
use crate::of_branch::{check_pair, OfBranch};
use crate::tensor::Tensor;

use super::config::{BranchSelector, ModelConfig};

/// Parameter name prefixes; they also select the per-branch learning rate.
pub const OF_PREFIX: &str = "of.";
pub const CD_PREFIX: &str = "cd.";

#[derive(Clone, Debug)]
pub struct JointNet {
    pub config: ModelConfig,
    pub of: OfBranch,
    pub cd: CdBranch,
    pub params: ParamStore,
}

/// Graph handles of one forward pass.
pub struct ModelTrace {
    /// Full-resolution flow (`output₁`).
    pub flow: Option<Var>,
    /// Upsampled iterates when every iteration is supervised.
    pub flow_iterates: Vec<Var>,
    /// Change probabilities (`output₂`).
    pub change: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub flow: Option<FlowField>,
    pub change: Option<ChangeMask>,
}

impl JointNet {
    /// Fresh weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let of = OfBranch::new(&mut pb.sub("of"), config.of_config())?;
        let cd = CdBranch::new(&mut pb.sub("cd"), config.cd_config())?;
        Ok(JointNet {
            config,
            of,
            cd,
            params,
        })
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        t0: Var,
        t1: Var,
        branch: BranchSelector,
        all_iterates: bool,
    ) -> ModelTrace {
        let (_, h, w) = g.value(t0).chw();
        let (flow, flow_iterates) = if branch.uses_flow() {
            let trace = self.of.forward_graph(g, ps, t0, t1, all_iterates);
            (Some(trace.flow), trace.upsampled_iterates)
        } else {
            (None, Vec::new())
        };
        let change = branch.uses_change().then(|| {
            // without the flow branch the change branch sees zero motion
            let f = flow.unwrap_or_else(|| g.constant(Tensor::zeros(&[2, h, w])));
            self.cd.forward_graph(g, ps, t0, t1, f)
        });
        ModelTrace {
            flow,
            flow_iterates,
            change,
        }
    }

    pub fn predict_pair(&self, t0: &Image, t1: &Image, branch: BranchSelector) -> Result<Prediction> {
        check_pair(t0, t1)?;
        let mut g = Graph::inference();
        let a = g.constant(t0.to_tensor());
        let b = g.constant(t1.to_tensor());
        let trace = self.forward_graph(&mut g, &self.params, a, b, branch, false);
        let flow = trace.flow.map(|f| FlowField::from_tensor(g.value(f))).transpose()?;
        let change = trace
            .change
            .map(|c| {
                ChangeMask::new(
                    t0.height(),
                    t0.width(),
                    g.value(c).data().to_vec(),
                    MaskKind::Prediction,
                )
            })
            .transpose()?;
        Ok(Prediction { flow, change })
    }

    pub fn predict(&self, sample: &BitemporalSample, branch: BranchSelector) -> Result<Prediction> {
        self.predict_pair(&sample.t0, &sample.t1, branch)
    }

    pub fn is_flow_param(&self, name: &str) -> bool {
        name.starts_with(OF_PREFIX)
    }
}
