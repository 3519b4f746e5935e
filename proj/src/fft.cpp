#include "stochtransport/fft.hpp"

#include <mutex>

namespace stochtransport {

namespace {
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace

Fft2d::Fft2d(int n) : n_(n) {
    std::lock_guard lock(planner_mutex());
    buf_ = reinterpret_cast<std::complex<double>*>(fftw_malloc(sizeof(fftw_complex) * n * n));
    auto* raw = reinterpret_cast<fftw_complex*>(buf_);
    fwd_ = fftw_plan_dft_2d(n, n, raw, raw, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_2d(n, n, raw, raw, FFTW_BACKWARD, FFTW_ESTIMATE);
}

Fft2d::~Fft2d() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(buf_);
}

void Fft2d::forward() { fftw_execute(fwd_); }
void Fft2d::backward() { fftw_execute(bwd_); }

}  // namespace stochtransport
