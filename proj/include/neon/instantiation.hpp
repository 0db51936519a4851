#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "neon/error.hpp"
#include "neon/io.hpp"

namespace neon {

enum class InstantiationMethod { icl, cgmh, human, retrieval, random };

inline std::string_view to_string(InstantiationMethod m) noexcept
{
    switch (m) {
    case InstantiationMethod::icl: return "icl";
    case InstantiationMethod::cgmh: return "cgmh";
    case InstantiationMethod::human: return "human";
    case InstantiationMethod::retrieval: return "retrieval";
    case InstantiationMethod::random: return "random";
    }
    return "icl";
}

inline InstantiationMethod parse_instantiation_method(std::string_view s)
{
    for (auto m : {InstantiationMethod::icl, InstantiationMethod::cgmh, InstantiationMethod::human,
                   InstantiationMethod::retrieval, InstantiationMethod::random}) {
        if (to_string(m) == s) return m;
    }
    throw ValidationError("unknown instantiation method '" + std::string(s) + "'");
}

/// A generated correct statement and where it came from.
struct Instantiation {
    std::string text;
    std::string source_id;
    InstantiationMethod method = InstantiationMethod::icl;
    int sample_index = 0;
    std::optional<double> fluency;
    std::optional<double> classifier_prob;

    friend bool operator==(const Instantiation&, const Instantiation&) = default;
};

inline json to_json(const Instantiation& h)
{
    json j{{"source_id", h.source_id}, {"method", to_string(h.method)}, {"sample_index", h.sample_index},
           {"text", h.text}};
    if (h.fluency) j["fluency"] = *h.fluency;
    if (h.classifier_prob) j["classifier_prob"] = *h.classifier_prob;
    return j;
}

inline Instantiation instantiation_from_json(const json& j)
{
    Instantiation h;
    h.source_id = j.at("source_id").get<std::string>();
    h.method = parse_instantiation_method(j.at("method").get<std::string>());
    h.sample_index = j.at("sample_index").get<int>();
    h.text = j.at("text").get<std::string>();
    if (j.contains("fluency")) h.fluency = j["fluency"].get<double>();
    if (j.contains("classifier_prob")) h.classifier_prob = j["classifier_prob"].get<double>();
    return h;
}

}  // namespace neon
