mod conv;
mod elementwise;
mod matmul;
mod nn;
mod shape;
