use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matgen::MaterialDataset;
use crate::nn::{
    build_knn_graph, KMeansTree, KdTree, KnnSource, LinearIndex, NnIndex, DEFAULT_BRANCHING, DEFAULT_LEAF_SIZE,
};

/// Index used to find the neighbor lists of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphBuilder {
    Linear,
    Kdtree,
    #[default]
    Kmeans,
}

fn default_leaf() -> usize {
    DEFAULT_LEAF_SIZE
}

fn default_branching() -> usize {
    DEFAULT_BRANCHING
}

fn default_graph_k() -> usize {
    50
}

fn default_builder_fd() -> f64 {
    0.6
}

/// Backend choice with its build parameters, as read from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
#[derive(Default)]
pub enum BackendSpec {
    #[default]
    Linear,
    Kdtree {
        #[serde(default = "default_leaf")]
        leaf_size: usize,
    },
    Kmeans {
        #[serde(default = "default_branching")]
        k: usize,
        #[serde(default)]
        seed: u64,
    },
    Graph {
        #[serde(default = "default_graph_k")]
        k: usize,
        #[serde(default)]
        builder: GraphBuilder,
        #[serde(default = "default_builder_fd")]
        builder_fd: f64,
        #[serde(default)]
        seed: u64,
    },
}


impl BackendSpec {
    /// Backend with default parameters from its short name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "linear" => BackendSpec::Linear,
            "kdtree" => BackendSpec::Kdtree { leaf_size: DEFAULT_LEAF_SIZE },
            "kmeans" => BackendSpec::Kmeans { k: DEFAULT_BRANCHING, seed: 0 },
            "graph" => BackendSpec::Graph {
                k: default_graph_k(),
                builder: GraphBuilder::default(),
                builder_fd: default_builder_fd(),
                seed: 0,
            },
            other => return Err(Error::Config(format!("unknown backend `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackendSpec::Linear => "linear",
            BackendSpec::Kdtree { .. } => "kdtree",
            BackendSpec::Kmeans { .. } => "kmeans",
            BackendSpec::Graph { .. } => "graph",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BackendSpec::Linear => Ok(()),
            BackendSpec::Kdtree { leaf_size } if leaf_size >= 1 => Ok(()),
            BackendSpec::Kmeans { k, .. } if k >= 2 => Ok(()),
            BackendSpec::Graph { k, builder_fd, .. } if k >= 1 && (0.0..=1.0).contains(&builder_fd) => Ok(()),
            _ => Err(Error::Config(format!("invalid parameters for backend {self:?}"))),
        }
    }

    pub fn build(&self, data: &MaterialDataset) -> Result<Box<dyn NnIndex>> {
        self.validate()?;
        Ok(match *self {
            BackendSpec::Linear => Box::new(LinearIndex::build(data)?),
            BackendSpec::Kdtree { leaf_size } => Box::new(KdTree::build(data, leaf_size)?),
            BackendSpec::Kmeans { k, seed } => Box::new(KMeansTree::build(data, k, seed)?),
            BackendSpec::Graph { k, builder, builder_fd, seed } => {
                let source: Box<dyn KnnSource> = match builder {
                    GraphBuilder::Linear => Box::new(LinearIndex::build(data)?),
                    GraphBuilder::Kdtree => Box::new(KdTree::build(data, DEFAULT_LEAF_SIZE)?),
                    GraphBuilder::Kmeans => Box::new(KMeansTree::build(data, DEFAULT_BRANCHING, seed)?),
                };
                Box::new(build_knn_graph(data, k, source.as_ref(), builder_fd, seed)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matgen::{sample_dataset, MaterialParams, DEFAULT_BOUNDS};
    use crate::nn::QueryParams;
    use crate::phase::pca_metric;

    #[derive(Deserialize)]
    struct Wrap {
        backend: BackendSpec,
    }

    #[test]
    fn parses_from_toml_with_defaults() {
        let w: Wrap = toml::from_str("[backend]\nkind = \"graph\"\nk = 10\n").unwrap();
        assert_eq!(
            w.backend,
            BackendSpec::Graph { k: 10, builder: GraphBuilder::Kmeans, builder_fd: 0.6, seed: 0 }
        );
        let w: Wrap = toml::from_str("[backend]\nkind = \"kdtree\"\n").unwrap();
        assert_eq!(w.backend, BackendSpec::Kdtree { leaf_size: 16 });
        assert!(toml::from_str::<Wrap>("[backend]\nkind = \"kdtree\"\nleafsize = 3\n").is_err());
        assert!(toml::from_str::<Wrap>("[backend]\nkind = \"hnsw\"\n").is_err());
    }

    #[test]
    fn every_backend_is_exact_at_full_accuracy() {
        let mut d = sample_dataset(2000, DEFAULT_BOUNDS, &MaterialParams::default(), 3).unwrap();
        d.bind_metric(pca_metric(d.points()).unwrap());
        let lin = LinearIndex::build(&d).unwrap();
        for name in ["linear", "kdtree", "kmeans"] {
            let idx = BackendSpec::from_name(name).unwrap().build(&d).unwrap();
            assert_eq!(idx.name(), name);
            for q in d.mapped().iter().step_by(97) {
                let q = crate::phase::MappedPoint(q.0.map(|v| v * 1.01));
                assert_eq!(idx.query(&q, &QueryParams::exact()).best_dist_sq, lin.query(&q, &QueryParams::exact()).best_dist_sq);
            }
        }
        let g = BackendSpec::from_name("graph").unwrap().build(&d).unwrap();
        assert_eq!(g.len(), 2000);
        assert!(BackendSpec::from_name("flann").is_err());
        assert!(BackendSpec::Kmeans { k: 1, seed: 0 }.build(&d).is_err());
    }
}
