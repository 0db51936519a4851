#pragma once

#include <algorithm>
#include <cmath>
#include <span>

namespace neon {

/// Cosine similarity clamped to [-1, 1]; 0 when either vector is zero.
inline double cosine(std::span<const double> a, std::span<const double> b)
{
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

}  // namespace neon
