#pragma once

#include <complex>
#include <span>

#include <fftw3.h>

namespace stochtransport {

/// Square n x n complex FFT with its own aligned buffer. Plans are built with
/// FFTW_ESTIMATE so results are bit-reproducible run to run. Plan creation is
/// serialised internally; execution is safe from any thread that owns the
/// object.
class Fft2d {
public:
    explicit Fft2d(int n);
    ~Fft2d();
    Fft2d(const Fft2d&) = delete;
    Fft2d& operator=(const Fft2d&) = delete;

    int n() const { return n_; }
    std::span<std::complex<double>> data() { return {buf_, static_cast<std::size_t>(n_) * n_}; }

    /// data <- sum_x data(x) e^{-2 pi i k.x / n}  (unnormalised)
    void forward();
    /// data <- sum_k data(k) e^{+2 pi i k.x / n}  (unnormalised)
    void backward();

private:
    int n_;
    std::complex<double>* buf_;
    fftw_plan fwd_;
    fftw_plan bwd_;
};

}  // namespace stochtransport
