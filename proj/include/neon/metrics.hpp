#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neon/error.hpp"
#include "neon/explain.hpp"
#include "neon/gateway.hpp"
#include "neon/io.hpp"
#include "neon/parallel.hpp"
#include "neon/text.hpp"
#include "neon/vec.hpp"

namespace neon::metrics {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline constexpr int bleu_max_n = 4;

inline NgramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n)
{
    NgramCounts counts;
    if (n == 0 || tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                          tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return counts;
}

/// Sufficient statistics of one candidate for corpus BLEU.
struct BleuStats {
    std::array<std::size_t, bleu_max_n> matches{};
    std::array<std::size_t, bleu_max_n> totals{};
    std::size_t candidate_length = 0;
    std::size_t reference_length = 0;

    BleuStats& operator+=(const BleuStats& o)
    {
        for (int n = 0; n < bleu_max_n; ++n) {
            matches[n] += o.matches[n];
            totals[n] += o.totals[n];
        }
        candidate_length += o.candidate_length;
        reference_length += o.reference_length;
        return *this;
    }

    friend bool operator==(const BleuStats&, const BleuStats&) = default;
};

/// Reference length closest to `c`; ties go to the shorter reference.
inline std::size_t closest_reference_length(std::size_t c, std::span<const Tokens> refs)
{
    std::size_t best = refs.front().size();
    for (const auto& r : refs) {
        const auto d = r.size() > c ? r.size() - c : c - r.size();
        const auto bd = best > c ? best - c : c - best;
        if (d < bd || (d == bd && r.size() < best)) best = r.size();
    }
    return best;
}

inline BleuStats bleu_stats(const Tokens& candidate, std::span<const Tokens> refs)
{
    if (refs.empty()) throw ValidationError("BLEU needs at least one reference");
    BleuStats s;
    s.candidate_length = candidate.size();
    s.reference_length = closest_reference_length(candidate.size(), refs);
    for (int n = 1; n <= bleu_max_n; ++n) {
        const auto cand = ngram_counts(candidate, n);
        NgramCounts max_ref;
        for (const auto& r : refs) {
            for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
        }
        for (const auto& [g, c] : cand) {
            auto it = max_ref.find(g);
            s.matches[n - 1] += std::min(c, it == max_ref.end() ? 0 : it->second);
            s.totals[n - 1] += c;
        }
    }
    return s;
}

/// Percentage from accumulated statistics: geometric mean of clipped
/// precisions times brevity penalty, 0 if any numerator is 0.
inline double bleu_from_stats(const BleuStats& s)
{
    double log_sum = 0.0;
    for (int n = 0; n < bleu_max_n; ++n) {
        if (s.matches[n] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
    }
    const double c = static_cast<double>(s.candidate_length);
    const double r = static_cast<double>(s.reference_length);
    const double log_bp = c > r ? 0.0 : 1.0 - r / c;
    return std::clamp(100.0 * std::exp(log_bp + log_sum / bleu_max_n), 0.0, 100.0);
}

/// Corpus BLEU-4 over metric-tokenized strings.
inline double bleu(std::span<const std::string> candidates, std::span<const std::vector<std::string>> references)
{
    if (candidates.size() != references.size()) throw ValidationError("BLEU: candidate/reference count mismatch");
    if (candidates.empty()) throw ValidationError("BLEU: no candidates");
    BleuStats total;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        std::vector<Tokens> refs;
        for (const auto& r : references[i]) refs.push_back(text::metric_tokenize(r));
        total += bleu_stats(text::metric_tokenize(candidates[i]), refs);
    }
    return bleu_from_stats(total);
}

struct Rouge {
    double rouge1 = 0.0;
    double rouge2 = 0.0;
    double rougeL = 0.0;
};

inline double f1_percent(double overlap, double cand_total, double ref_total)
{
    if (overlap <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
    const double p = overlap / cand_total;
    const double r = overlap / ref_total;
    return std::clamp(100.0 * 2.0 * p * r / (p + r), 0.0, 100.0);
}

inline double rouge_n_f1(const Tokens& cand, const Tokens& ref, std::size_t n)
{
    const auto cc = ngram_counts(cand, n);
    const auto rc = ngram_counts(ref, n);
    std::size_t overlap = 0;
    for (const auto& [g, c] : cc) {
        auto it = rc.find(g);
        if (it != rc.end()) overlap += std::min(c, it->second);
    }
    const double ct = cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 0.0;
    const double rt = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
    return f1_percent(static_cast<double>(overlap), ct, rt);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b)
{
    std::vector<std::size_t> row(b.size() + 1, 0);
    for (const auto& x : a) {
        std::size_t diag = 0;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = x == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
            diag = up;
        }
    }
    return row[b.size()];
}

/// ROUGE-1/2/L F1 percentages; each variant takes its max over references.
inline Rouge rouge(std::string_view candidate, std::span<const std::string> references)
{
    if (references.empty()) throw ValidationError("ROUGE needs at least one reference");
    const auto cand = text::metric_tokenize(candidate);
    Rouge best;
    for (const auto& r : references) {
        const auto ref = text::metric_tokenize(r);
        best.rouge1 = std::max(best.rouge1, rouge_n_f1(cand, ref, 1));
        best.rouge2 = std::max(best.rouge2, rouge_n_f1(cand, ref, 2));
        best.rougeL = std::max(best.rougeL, f1_percent(static_cast<double>(lcs_length(cand, ref)),
                                                       static_cast<double>(cand.size()),
                                                       static_cast<double>(ref.size())));
    }
    return best;
}

using VectorSpan = std::span<const std::vector<double>>;

/// Greedy-matching F1 between two token-vector sequences, as a percentage
/// floored at 0.
inline double greedy_match_f1(VectorSpan cand, VectorSpan ref)
{
    if (cand.empty() || ref.empty()) return 0.0;
    if (cand.front().size() != ref.front().size()) throw BackendError("dimension_mismatch", "token vectors differ in dimension");
    std::vector<double> best_for_ref(ref.size(), -1.0);
    double p_sum = 0.0;
    for (const auto& c : cand) {
        double best = -1.0;
        for (std::size_t j = 0; j < ref.size(); ++j) {
            const double s = cosine(c, ref[j]);
            best = std::max(best, s);
            best_for_ref[j] = std::max(best_for_ref[j], s);
        }
        p_sum += best;
    }
    double r_sum = 0.0;
    for (double b : best_for_ref) r_sum += b;
    const double p = p_sum / static_cast<double>(cand.size());
    const double r = r_sum / static_cast<double>(ref.size());
    if (p + r <= 0.0) return 0.0;
    return std::clamp(100.0 * 2.0 * p * r / (p + r), 0.0, 100.0);
}

/// Max-over-references greedy-matching F1 from precomputed token vectors.
inline double bertscore_from_vectors(VectorSpan cand, std::span<const VectorSpan> refs)
{
    if (refs.empty()) throw ValidationError("BERTScore needs at least one reference");
    double best = 0.0;
    for (const auto& r : refs) best = std::max(best, greedy_match_f1(cand, r));
    return best;
}

inline double sbert_from_vectors(std::span<const double> cand, std::span<const std::vector<double>> refs)
{
    if (refs.empty()) throw ValidationError("sentence similarity needs at least one reference");
    double best = 0.0;
    for (const auto& r : refs) {
        if (r.size() != cand.size()) throw BackendError("dimension_mismatch", "sentence vectors differ in dimension");
        best = std::max(best, cosine(cand, r));
    }
    return std::clamp(100.0 * best, 0.0, 100.0);
}

namespace detail {

inline std::vector<std::string> trimmed(std::span<const std::string> texts)
{
    std::vector<std::string> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.emplace_back(text::trim(t));
    return out;
}

}  // namespace detail

inline double bertscore_f1(std::string_view candidate, std::span<const std::string> references, Gateway& gateway)
{
    if (references.empty()) throw ValidationError("BERTScore needs at least one reference");
    std::vector<std::string> texts{std::string(text::trim(candidate))};
    for (auto& r : detail::trimmed(references)) texts.push_back(std::move(r));
    const auto e = gateway.embed(texts, Granularity::token);
    std::vector<VectorSpan> refs;
    for (std::size_t i = 1; i < texts.size(); ++i) refs.push_back(e.token_vectors(i));
    return bertscore_from_vectors(e.token_vectors(0), refs);
}

inline double sbert_cosine(std::string_view candidate, std::span<const std::string> references, Gateway& gateway)
{
    if (references.empty()) throw ValidationError("sentence similarity needs at least one reference");
    std::vector<std::string> texts{std::string(text::trim(candidate))};
    for (auto& r : detail::trimmed(references)) texts.push_back(std::move(r));
    const auto e = gateway.embed(texts, Granularity::sentence);
    return sbert_from_vectors(e.vectors.front(), std::span(e.vectors).subspan(1));
}

struct RecordScores {
    std::string source_id;
    BleuStats bleu;
    Rouge rouge;
    double bertscore_f1 = 0.0;
    double sbert_cosine = 0.0;
};

struct MetricReport {
    std::string method;
    std::size_t n_records = 0;
    double bleu = 0.0;
    Rouge rouge;
    double bertscore_f1 = 0.0;
    double sbert_cosine = 0.0;
    std::optional<std::vector<RecordScores>> per_record;
};

struct EvaluateOptions {
    bool keep_rows = false;
    /// Texts per embedding call.
    std::size_t embed_batch = 64;
    std::size_t threads = default_concurrency();
};

/// Aggregates from rows: corpus BLEU over summed statistics, plain means for
/// everything else.
inline MetricReport aggregate(std::string method, const std::vector<RecordScores>& rows)
{
    if (rows.empty()) throw ValidationError("cannot aggregate zero records");
    MetricReport rep;
    rep.method = std::move(method);
    rep.n_records = rows.size();
    BleuStats total;
    for (const auto& r : rows) {
        total += r.bleu;
        rep.rouge.rouge1 += r.rouge.rouge1;
        rep.rouge.rouge2 += r.rouge.rouge2;
        rep.rouge.rougeL += r.rouge.rougeL;
        rep.bertscore_f1 += r.bertscore_f1;
        rep.sbert_cosine += r.sbert_cosine;
    }
    const double n = static_cast<double>(rows.size());
    rep.bleu = bleu_from_stats(total);
    rep.rouge.rouge1 /= n;
    rep.rouge.rouge2 /= n;
    rep.rouge.rougeL /= n;
    rep.bertscore_f1 /= n;
    rep.sbert_cosine /= n;
    return rep;
}

/// Scores every record against its references. All records must share one
/// method and one task.
inline MetricReport evaluate_run(std::span<const explain::ExplanationRecord> records, Gateway& gateway,
                                 const EvaluateOptions& options = {})
{
    if (records.empty()) throw ValidationError("cannot evaluate zero records");
    const auto method = records.front().method;
    const auto task = records.front().template_id.task;
    for (const auto& r : records) {
        if (r.method != method) throw ValidationError("records mix methods");
        if (r.template_id.task != task) throw ValidationError("records mix tasks");
        if (r.references.empty()) throw ValidationError("record " + r.source_id + " has no references");
    }

    // Flatten candidate + references per record for batched embedding.
    std::vector<std::string> texts;
    std::vector<std::size_t> offset(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        offset[i] = texts.size();
        texts.emplace_back(text::trim(records[i].explanation));
        for (const auto& ref : records[i].references) texts.emplace_back(text::trim(ref));
    }
    const std::size_t batch = std::max<std::size_t>(1, options.embed_batch);
    const std::size_t n_batches = (texts.size() + batch - 1) / batch;
    std::vector<EmbeddingResult> tok(n_batches), sent(n_batches);
    parallel_for(n_batches, options.threads, [&](std::size_t b) {
        const auto first = b * batch;
        const auto chunk = std::span<const std::string>(texts).subspan(first, std::min(batch, texts.size() - first));
        tok[b] = gateway.embed(chunk, Granularity::token);
        sent[b] = gateway.embed(chunk, Granularity::sentence);
    });
    auto token_vectors = [&](std::size_t t) { return tok[t / batch].token_vectors(t % batch); };
    auto sentence_vector = [&](std::size_t t) -> const std::vector<double>& { return sent[t / batch].vectors[t % batch]; };

    std::vector<RecordScores> rows(records.size());
    parallel_for(records.size(), options.threads, [&](std::size_t i) {
        const auto& rec = records[i];
        auto& row = rows[i];
        row.source_id = rec.source_id;
        std::vector<Tokens> ref_tokens;
        for (const auto& ref : rec.references) ref_tokens.push_back(text::metric_tokenize(ref));
        row.bleu = bleu_stats(text::metric_tokenize(rec.explanation), ref_tokens);
        row.rouge = rouge(rec.explanation, rec.references);
        std::vector<VectorSpan> ref_tv;
        std::vector<std::vector<double>> ref_sv;
        for (std::size_t k = 0; k < rec.references.size(); ++k) {
            ref_tv.push_back(token_vectors(offset[i] + 1 + k));
            ref_sv.push_back(sentence_vector(offset[i] + 1 + k));
        }
        row.bertscore_f1 = bertscore_from_vectors(token_vectors(offset[i]), ref_tv);
        row.sbert_cosine = sbert_from_vectors(sentence_vector(offset[i]), ref_sv);
    });

    auto rep = aggregate(std::string(explain::to_string(method)), rows);
    if (options.keep_rows) rep.per_record = std::move(rows);
    return rep;
}

inline json to_json(const RecordScores& r)
{
    return json{{"source_id", r.source_id},
                {"bleu_matches", r.bleu.matches},
                {"bleu_totals", r.bleu.totals},
                {"candidate_length", r.bleu.candidate_length},
                {"reference_length", r.bleu.reference_length},
                {"rouge1", r.rouge.rouge1},
                {"rouge2", r.rouge.rouge2},
                {"rougeL", r.rouge.rougeL},
                {"bertscore_f1", r.bertscore_f1},
                {"sbert_cosine", r.sbert_cosine}};
}

inline RecordScores record_scores_from_json(const json& j)
{
    RecordScores r;
    r.source_id = j.at("source_id").get<std::string>();
    r.bleu.matches = j.at("bleu_matches").get<std::array<std::size_t, bleu_max_n>>();
    r.bleu.totals = j.at("bleu_totals").get<std::array<std::size_t, bleu_max_n>>();
    r.bleu.candidate_length = j.at("candidate_length").get<std::size_t>();
    r.bleu.reference_length = j.at("reference_length").get<std::size_t>();
    r.rouge = {j.at("rouge1").get<double>(), j.at("rouge2").get<double>(), j.at("rougeL").get<double>()};
    r.bertscore_f1 = j.at("bertscore_f1").get<double>();
    r.sbert_cosine = j.at("sbert_cosine").get<double>();
    return r;
}

inline json to_json(const MetricReport& r)
{
    json j{{"method", r.method},
           {"n_records", r.n_records},
           {"bleu", r.bleu},
           {"rouge", {{"rouge1", r.rouge.rouge1}, {"rouge2", r.rouge.rouge2}, {"rougeL", r.rouge.rougeL}}},
           {"bertscore_f1", r.bertscore_f1},
           {"sbert_cosine", r.sbert_cosine}};
    if (r.per_record) {
        json rows = json::array();
        for (const auto& row : *r.per_record) rows.push_back(to_json(row));
        j["per_record"] = std::move(rows);
    }
    return j;
}

inline MetricReport metric_report_from_json(const json& j)
{
    MetricReport r;
    r.method = j.at("method").get<std::string>();
    r.n_records = j.at("n_records").get<std::size_t>();
    r.bleu = j.at("bleu").get<double>();
    const auto& rg = j.at("rouge");
    r.rouge = {rg.at("rouge1").get<double>(), rg.at("rouge2").get<double>(), rg.at("rougeL").get<double>()};
    r.bertscore_f1 = j.at("bertscore_f1").get<double>();
    r.sbert_cosine = j.at("sbert_cosine").get<double>();
    if (j.contains("per_record")) {
        r.per_record.emplace();
        for (const auto& row : j.at("per_record")) r.per_record->push_back(record_scores_from_json(row));
    }
    return r;
}

/// Fixed-precision decimal used in every CSV and text table.
inline std::string fixed(double v, int digits = 2)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string csv_quote(std::string_view s)
{
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string per_record_csv(const std::vector<RecordScores>& rows)
{
    std::string out = "source_id,bleu_m1,bleu_m2,bleu_m3,bleu_m4,bleu_t1,bleu_t2,bleu_t3,bleu_t4,candidate_length,"
                      "reference_length,rouge1,rouge2,rougeL,bertscore_f1,sbert_cosine\n";
    for (const auto& r : rows) {
        out += csv_quote(r.source_id);
        for (auto m : r.bleu.matches) out += "," + std::to_string(m);
        for (auto t : r.bleu.totals) out += "," + std::to_string(t);
        out += "," + std::to_string(r.bleu.candidate_length) + "," + std::to_string(r.bleu.reference_length);
        for (double v : {r.rouge.rouge1, r.rouge.rouge2, r.rouge.rougeL, r.bertscore_f1, r.sbert_cosine}) {
            out += "," + fixed(v, 6);
        }
        out += "\n";
    }
    return out;
}

}  // namespace neon::metrics
