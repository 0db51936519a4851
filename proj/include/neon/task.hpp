#pragma once

#include <string>
#include <string_view>

#include "neon/error.hpp"

namespace neon {

enum class Task { comve, esnli };
enum class Split { train, dev, test };

inline std::string_view to_string(Task t) noexcept
{
    return t == Task::comve ? "comve" : "esnli";
}

inline std::string_view to_string(Split s) noexcept
{
    switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
    }
    return "test";
}

inline Task parse_task(std::string_view s)
{
    if (s == "comve") return Task::comve;
    if (s == "esnli" || s == "e-snli") return Task::esnli;
    throw ValidationError("unknown task '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s)
{
    if (s == "train") return Split::train;
    if (s == "dev") return Split::dev;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + std::string(s) + "'");
}

/// Max generated tokens for one Phase I instantiation.
constexpr int instantiation_max_tokens(Task t) noexcept
{
    return t == Task::comve ? 25 : 40;
}

constexpr int explanation_max_tokens = 30;
constexpr std::size_t default_context_budget = 2048;

}  // namespace neon
