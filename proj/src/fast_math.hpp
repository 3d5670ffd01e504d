#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>

namespace elvis::detail {

// Branch-free single-precision exp (Cephes polynomial) so that loops over
// it vectorize. Relative error is a few ulp over the clamped range; inputs
// below the range return exp(-87.3) instead of a denormal.
inline float fast_expf(float x) {
    x = std::min(std::max(x, -87.3f), 88.3f);
    const float t = x * 1.44269504088896341f;
    const float n = (t + 12582912.0f) - 12582912.0f;  // round to nearest
    const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
    const float z = r * r;
    float y = 1.9875691500e-4f;
    y = y * r + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * z + r + 1.0f;
    const std::int32_t e = static_cast<std::int32_t>(n) + 127;
    return y * std::bit_cast<float>(static_cast<std::uint32_t>(e) << 23);
}

}  // namespace elvis::detail
