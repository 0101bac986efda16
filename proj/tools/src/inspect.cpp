#include "inspect.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cpool/data.hpp"
#include "cpool/ops.hpp"

namespace cpool::cli {

namespace {

std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<std::size_t> cp_blocks(const TransformerLM& lm) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < lm.blocks().size(); ++l)
    if (lm.blocks()[l].cp) out.push_back(l);
  if (out.empty()) throw std::runtime_error("checkpoint has no ContextPool layers to inspect");
  return out;
}

}  // namespace

std::vector<int> read_token_file(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read input " + path.string());
  std::vector<int> tokens;
  for (auto it = std::istreambuf_iterator<char>(in); it != std::istreambuf_iterator<char>(); ++it) {
    const int t = static_cast<unsigned char>(*it);
    if (std::size_t(t) >= vocab_size)
      throw DatasetError("input byte " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab_size));
    tokens.push_back(t);
  }
  if (tokens.empty()) throw DatasetError("input " + path.string() + " is empty");
  return tokens;
}

std::vector<LayerPoolData> collect_pool_data(const TransformerLM& lm, std::span<const int> tokens, bool with_masks) {
  const auto blocks = cp_blocks(lm);
  NoGradGuard ng;
  std::vector<PoolTrace> traces;
  lm.forward(tokens, traces);
  std::vector<LayerPoolData> out;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& p = traces[i].params;
    LayerPoolData d{blocks[i], values(p.w), values(p.s), values(p.sigma), std::nullopt};
    if (with_masks) d.g = values(traces[i].masks);
    out.push_back(std::move(d));
  }
  return out;
}

nlohmann::json mask_dump(const std::vector<LayerPoolData>& layers, const nlohmann::json& input,
                         const nlohmann::json& checkpoint, WeightingMode weighting) {
  auto out_layers = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json j = {{"layer", l.layer}, {"n", l.w.size()}, {"w", l.w}, {"s", l.s}, {"sigma", l.sigma}};
    if (l.g) {
      const auto n = l.w.size();
      if (l.g->size() != n * n) throw std::invalid_argument("mask_dump: g must hold n x n values");
      auto rows = nlohmann::json::array();
      for (std::size_t i = 0; i < n; ++i)
        rows.push_back(std::vector<double>(l.g->begin() + std::ptrdiff_t(i * n), l.g->begin() + std::ptrdiff_t((i + 1) * n)));
      j["g"] = std::move(rows);
    }
    out_layers.push_back(std::move(j));
  }
  return {{"format", "cpool-maskdump"},
          {"version", 1},
          {"input", input},
          {"checkpoint", checkpoint},
          {"weighting", std::string(to_string(weighting))},
          {"layers", std::move(out_layers)}};
}

std::vector<std::string> mask_dump_violations(const nlohmann::json& dump) {
  std::vector<std::string> bad;
  if (!dump.contains("input") || !dump.contains("checkpoint") || !dump.at("checkpoint").contains("hash"))
    bad.push_back("missing input identifier or checkpoint hash");
  const bool learned = dump.value("weighting", "") == "learned";
  if (!dump.contains("layers") || !dump.at("layers").is_array() || dump.at("layers").empty()) {
    bad.push_back("no layers");
    return bad;
  }
  for (const auto& l : dump.at("layers")) {
    const auto tag = "layer " + l.value("layer", nlohmann::json()).dump() + ": ";
    const auto w = l.at("w").get<std::vector<double>>();
    const auto s = l.at("s").get<std::vector<double>>();
    const auto sigma = l.at("sigma").get<std::vector<double>>();
    const auto n = w.size();
    if (n == 0 || s.size() != n || sigma.size() != n) bad.push_back(tag + "w, s, sigma lengths differ");
    if (l.contains("g")) {
      const auto& g = l.at("g");
      bool square = g.is_array() && g.size() == n;
      for (const auto& row : g) square = square && row.is_array() && row.size() == n;
      if (!square) bad.push_back(tag + "g is not n x n");
    }
    for (double v : s)
      if (!(v >= 0.0 && v <= 1.0)) {
        bad.push_back(tag + "s outside [0, 1]: " + std::to_string(v));
        break;
      }
    if (learned) {
      double total = 0.0;
      for (double v : w) total += v;
      if (!(std::abs(total - 1.0) <= 1e-6)) bad.push_back(tag + "w sums to " + std::to_string(total));
    }
  }
  return bad;
}

std::vector<PoolStats> pool_stats(const TransformerLM& lm, std::span<const int> tokens, std::size_t window) {
  const auto blocks = cp_blocks(lm);
  if (window == 0) throw std::invalid_argument("pool_stats: window must be >= 1");
  std::vector<PoolStats> stats(blocks.size());
  std::vector<double> sum(blocks.size(), 0.0), sq(blocks.size(), 0.0);
  for (std::size_t i = 0; i < blocks.size(); ++i) stats[i].layer = blocks[i];
  for (std::size_t at = 0; at < tokens.size(); at += window) {
    const auto layers = collect_pool_data(lm, tokens.subspan(at, std::min(window, tokens.size() - at)), false);
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (double s : layers[i].s) {
        const auto bin = std::min<std::size_t>(kHistogramBins - 1, std::size_t(s * double(kHistogramBins)));
        ++stats[i].counts[bin];
        ++stats[i].tokens;
        sum[i] += s;
        sq[i] += s * s;
      }
  }
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const double n = double(stats[i].tokens);
    stats[i].mean_s = sum[i] / n;
    stats[i].std_s = std::sqrt(std::max(0.0, sq[i] / n - stats[i].mean_s * stats[i].mean_s));
  }
  return stats;
}

std::string pool_stats_csv(const std::vector<PoolStats>& stats) {
  std::ostringstream os;
  os << "layer,bin_lo,bin_hi,count\n";
  for (const auto& st : stats)
    for (std::size_t b = 0; b < kHistogramBins; ++b)
      os << st.layer << ',' << shortest(double(b) / kHistogramBins) << ','
         << shortest(double(b + 1) / kHistogramBins) << ',' << st.counts[b] << '\n';
  os << "layer,mean_s,std_s\n";
  for (const auto& st : stats) os << st.layer << ',' << shortest(st.mean_s) << ',' << shortest(st.std_s) << '\n';
  return os.str();
}

}  // namespace cpool::cli
