#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace spin::kernels {

// f32 dot product with eight interleaved partial sums, reduced pairwise at
// the end. The summation order is fixed so results do not depend on the
// compiler's vectorisation choices.
inline float dot(const float* a, const float* b, std::size_t n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
    }
    for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i] * b[i];
    const float s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    const float s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    return s0 + s1;
}

inline float dot(std::span<const float> a, std::span<const float> b) {
    return dot(a.data(), b.data(), a.size());
}

// out[r] = W[r, :] . x for W stored [rows, cols] row-major.
inline void matvec(std::span<const float> w, std::span<const float> x, std::span<float> out) {
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = dot(w.data() + r * cols, x.data(), cols);
}

inline void rmsnorm(std::span<const float> x, std::span<const float> gain, std::span<float> out,
                    float eps = 1e-5f) {
    const float ms = dot(x, x) / static_cast<float>(x.size());
    const float inv = 1.0f / std::sqrt(ms + eps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

// In-place numerically stable softmax.
inline void softmax(std::span<float> x) {
    float mx = x[0];
    for (float v : x) mx = v > mx ? v : mx;
    float sum = 0.0f;
    for (float& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    const float inv = 1.0f / sum;
    for (float& v : x) v *= inv;
}

// tanh approximation.
inline float gelu(float x) {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

}  // namespace spin::kernels
