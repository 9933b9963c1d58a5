// Link the system OpenBLAS (which bundles BLAS, CBLAS and LAPACK) instead of
// pulling in a *-src provider crate. Requires libopenblas-dev (Debian/Ubuntu)
// or an equivalent package that installs libopenblas.so on the library path.
fn main() {
    println!("cargo:rustc-link-lib=dylib=openblas");
    println!("cargo:rustc-link-lib=dylib=gfortran");
}
