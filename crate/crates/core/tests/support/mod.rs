pub mod lpc_oracle;
