//! The hierarchical attention network.
//!
//! PCC rows are embedded into node tokens, then `layers` blocks each run node
//! self-attention followed by a Sparsemax cross-attention from the K subgraph
//! tokens onto the nodes. After the last block a single graph token attends
//! over itself and the subgraph tokens. The graph-head classifier reads the
//! graph token together with mean-pooled subgraph and node tokens; the
//! auxiliary head reads mean-pooled node tokens only.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, SubgraphActivation};
pub use forward::{
    bind, classifier_features, embed_nodes, forward, forward_graph, mean_pairwise_cosine,
    node_to_node, node_to_subgraph, positive_probability, subgraph_to_graph, AttentionTrace,
    Dropout, ForwardOutput, ForwardVars, LayerTrace, Mode,
};
pub use params::{Attention, Block, Linear, ModelParams, Norm};
