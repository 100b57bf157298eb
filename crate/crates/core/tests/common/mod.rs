pub mod oracles;
pub mod graph_oracle;
