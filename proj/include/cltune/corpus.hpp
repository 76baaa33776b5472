// Copyright (c) 2026 cltune contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cltune/rng.hpp"
#include "cltune/tensor.hpp"

namespace cltune {

// Reserved token ids. Generated text never uses them; real tokens start at
// kFirstRegularToken.
constexpr std::int32_t kPadToken = 0;
constexpr std::int32_t kMaskToken = 1;
constexpr std::int32_t kUnkToken = 2;
constexpr std::int32_t kClsToken = 3;
constexpr std::int32_t kFirstRegularToken = 4;

enum class Domain { kSource, kTarget };
enum class Split { kTrain, kValidation };

inline const char* domain_tag(Domain d) { return d == Domain::kSource ? "s" : "t"; }
inline const char* split_tag(Split s) { return s == Split::kTrain ? "train" : "val"; }

/// Order-2 Markov chain over a token alphabet. The target domain is a
/// convex blend of the source table with an independent table, so domain
/// distance is a dial: overlap 1 reproduces the source exactly.
struct DomainSpec {
  int alphabet_size = 0;
  std::vector<double> transition;  // (A*A) rows of A conditional probabilities
  double overlap = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(alphabet_size > 0, "alphabet_size must be positive");
    const std::size_t a = static_cast<std::size_t>(alphabet_size);
    require(transition.size() == a * a * a,
            "transition table must have alphabet^3 entries, got " +
                std::to_string(transition.size()));
    for (std::size_t row = 0; row < a * a; ++row) {
      double sum = 0;
      for (std::size_t j = 0; j < a; ++j) {
        const double p = transition[row * a + j];
        if (p < 0) throw ConfigError("negative transition probability in row " + std::to_string(row));
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("transition row " + std::to_string(row) + " sums to " +
                          std::to_string(sum) + ", expected 1");
    }
  }
};

namespace detail {

inline std::vector<double> random_table(int alphabet, std::uint64_t seed, double peakedness) {
  const std::size_t a = static_cast<std::size_t>(alphabet);
  std::vector<double> t(a * a * a);
  RngStream rng(mix_seed(seed, fnv1a64("transition-table")));
  for (std::size_t row = 0; row < a * a; ++row) {
    double sum = 0;
    for (std::size_t j = 0; j < a; ++j) {
      const double u = rng.next_double();
      const double w = std::pow(u, peakedness) + 1e-4;
      t[row * a + j] = w;
      sum += w;
    }
    for (std::size_t j = 0; j < a; ++j) t[row * a + j] /= sum;
  }
  return t;
}

}  // namespace detail

inline DomainSpec make_source_spec(int alphabet, std::uint64_t seed, double peakedness = 6.0) {
  DomainSpec s;
  s.alphabet_size = alphabet;
  s.seed = seed;
  s.overlap = 1.0;
  s.transition = detail::random_table(alphabet, seed, peakedness);
  s.validate();
  return s;
}

inline DomainSpec make_target_spec(const DomainSpec& source, double overlap, std::uint64_t seed,
                                   double peakedness = 6.0) {
  source.validate();
  require(overlap >= 0.0 && overlap <= 1.0, "overlap must be in [0,1]");
  DomainSpec t;
  t.alphabet_size = source.alphabet_size;
  t.seed = seed;
  t.overlap = overlap;
  const auto raw = detail::random_table(source.alphabet_size, seed, peakedness);
  t.transition.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    t.transition[i] = overlap * source.transition[i] + (1.0 - overlap) * raw[i];
  t.validate();
  return t;
}

struct TokenStream {
  std::vector<std::int32_t> ids;  // within [kFirstRegularToken, kFirstRegularToken + alphabet)
  Domain domain = Domain::kSource;
  Split split = Split::kTrain;
};

/// Walks the Markov chain for n_tokens steps. Train and validation use
/// different offset seeds, so the two streams never share a sample path.
inline TokenStream generate_domain(const DomainSpec& spec, std::size_t n_tokens, Domain domain,
                                   Split split) {
  spec.validate();
  require(n_tokens > 0, "n_tokens must be positive");
  const std::size_t a = static_cast<std::size_t>(spec.alphabet_size);
  RngStream rng(mix_seed(spec.seed, fnv1a64(std::string("stream-") + split_tag(split))));
  TokenStream out;
  out.domain = domain;
  out.split = split;
  out.ids.reserve(n_tokens);
  std::size_t prev2 = rng.next_below(a);
  std::size_t prev1 = rng.next_below(a);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const double* row = spec.transition.data() + (prev2 * a + prev1) * a;
    const double u = rng.next_double();
    double cum = 0;
    std::size_t pick = a - 1;
    for (std::size_t j = 0; j < a; ++j) {
      cum += row[j];
      if (u < cum) {
        pick = j;
        break;
      }
    }
    out.ids.push_back(static_cast<std::int32_t>(pick) + kFirstRegularToken);
    prev2 = prev1;
    prev1 = pick;
  }
  return out;
}

/// Contiguous non-overlapping windows; the trailing partial window is
/// padded with kPadToken.
inline std::vector<std::vector<std::int32_t>> pack_sequences(const TokenStream& stream,
                                                             int seq_len) {
  require(seq_len > 0, "seq_len must be positive");
  std::vector<std::vector<std::int32_t>> rows;
  const std::size_t l = static_cast<std::size_t>(seq_len);
  for (std::size_t start = 0; start < stream.ids.size(); start += l) {
    std::vector<std::int32_t> row(l, kPadToken);
    const std::size_t n = std::min(l, stream.ids.size() - start);
    for (std::size_t i = 0; i < n; ++i) row[i] = stream.ids[start + i];
    rows.push_back(std::move(row));
  }
  return rows;
}

/// One training batch after MLM corruption. labels[i] is the original
/// token at flat position positions[i] (row-major b*seq_len + pos).
struct MaskedBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<std::int32_t> input_ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::vector<std::int32_t>> mask_positions;  // per row
  std::vector<std::int32_t> positions;                    // flattened gather order
  std::vector<std::int32_t> labels;
  std::string rng_stream_id;
};

struct MaskPolicy {
  double mask_fraction = 0.15;
  double mask_prob = 0.8;    // replace with kMaskToken
  double random_prob = 0.1;  // replace with a uniform regular token
};

inline MaskPolicy plain_mask_policy() { return MaskPolicy{0.15, 1.0, 0.0}; }

/// Chooses ceil(mask_fraction * non_pad) positions per row without
/// replacement and applies the corruption rule. Deterministic in the rows
/// and the stream state.
inline MaskedBatch mask_batch(const std::vector<std::vector<std::int32_t>>& rows, RngStream& rng,
                              int vocab_size, std::string stream_id,
                              const MaskPolicy& policy = MaskPolicy{}) {
  require(!rows.empty(), "mask_batch: empty row list");
  MaskedBatch b;
  b.batch = static_cast<int>(rows.size());
  b.seq_len = static_cast<int>(rows[0].size());
  b.rng_stream_id = std::move(stream_id);
  const int alphabet = vocab_size - kFirstRegularToken;
  require(alphabet > 0, "vocab too small for regular tokens");

  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    require(static_cast<int>(row.size()) == b.seq_len, "mask_batch: ragged rows");
    std::vector<std::int32_t> non_pad;
    for (std::size_t i = 0; i < row.size(); ++i) {
      require(row[i] >= 0 && row[i] < vocab_size, "token id out of vocab range");
      if (row[i] != kPadToken) non_pad.push_back(static_cast<std::int32_t>(i));
    }
    if (non_pad.empty()) throw Error("mask_batch: row " + std::to_string(r) + " is all padding");

    // ceil(mask_fraction * n) with exact integer arithmetic for the
    // default 15% so replay never hits a float boundary.
    const std::size_t n = non_pad.size();
    std::size_t k;
    if (policy.mask_fraction == 0.15) {
      k = (3 * n + 19) / 20;
    } else {
      k = static_cast<std::size_t>(std::ceil(policy.mask_fraction * static_cast<double>(n)));
      k = std::max<std::size_t>(1, std::min(k, n));
    }

    auto chosen = rng.sample_without_replacement(n, k);
    std::vector<std::int32_t> pos(k);
    for (std::size_t i = 0; i < k; ++i) pos[i] = non_pad[chosen[i]];
    std::sort(pos.begin(), pos.end());

    std::vector<std::int32_t> masked_row = row;
    for (std::int32_t p : pos) {
      const std::int32_t original = row[p];
      const double u = rng.next_double();
      if (u < policy.mask_prob) {
        masked_row[p] = kMaskToken;
      } else if (u < policy.mask_prob + policy.random_prob) {
        masked_row[p] =
            kFirstRegularToken + static_cast<std::int32_t>(rng.next_below(alphabet));
      }  // else keep the original token
      b.positions.push_back(static_cast<std::int32_t>(r) * b.seq_len + p);
      b.labels.push_back(original);
    }
    b.mask_positions.push_back(std::move(pos));
    for (std::int32_t t : masked_row) b.input_ids.push_back(t);
    for (std::int32_t t : row) b.attention_mask.push_back(t != kPadToken ? 1 : 0);
  }
  return b;
}

/// A batch with no corruption at all; used for representation probes.
inline MaskedBatch plain_batch(const std::vector<std::vector<std::int32_t>>& rows) {
  require(!rows.empty(), "plain_batch: empty row list");
  MaskedBatch b;
  b.batch = static_cast<int>(rows.size());
  b.seq_len = static_cast<int>(rows[0].size());
  b.rng_stream_id = "none";
  for (const auto& row : rows) {
    for (std::int32_t t : row) {
      b.input_ids.push_back(t);
      b.attention_mask.push_back(t != kPadToken ? 1 : 0);
    }
    b.mask_positions.emplace_back();
  }
  return b;
}

// --------------------------------------------------------------------------
// Corpus cache files: one decimal token id per line after a header line.

inline void write_corpus_file(const std::filesystem::path& path, const TokenStream& stream,
                              std::uint64_t seed, const std::string& config_digest) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot open corpus file for writing: " + path.string());
  out << "#cltune-corpus v1 domain=" << domain_tag(stream.domain)
      << " split=" << split_tag(stream.split) << " seed=" << seed << " digest=" << config_digest
      << "\n";
  for (std::int32_t id : stream.ids) out << id << "\n";
  require(out.good(), "failed writing corpus file: " + path.string());
}

struct CorpusHeader {
  std::string domain, split, digest;
  std::uint64_t seed = 0;
};

inline CorpusHeader parse_corpus_header(const std::string& line) {
  CorpusHeader h;
  require(line.rfind("#cltune-corpus v1 ", 0) == 0, "not a cltune corpus header: " + line);
  std::istringstream is(line.substr(std::string("#cltune-corpus v1 ").size()));
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    require(eq != std::string::npos, "malformed corpus header field: " + tok);
    const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
    if (key == "domain") h.domain = value;
    else if (key == "split") h.split = value;
    else if (key == "seed") h.seed = std::stoull(value);
    else if (key == "digest") h.digest = value;
    else throw ConfigError("unknown corpus header field: " + key);
  }
  return h;
}

inline TokenStream read_corpus_file(const std::filesystem::path& path, CorpusHeader* header_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw MissingArtifactError("corpus file not found: " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "empty corpus file: " + path.string());
  const CorpusHeader h = parse_corpus_header(line);
  TokenStream s;
  s.domain = h.domain == "s" ? Domain::kSource : Domain::kTarget;
  s.split = h.split == "train" ? Split::kTrain : Split::kValidation;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    s.ids.push_back(static_cast<std::int32_t>(std::stol(line)));
  }
  if (header_out) *header_out = h;
  return s;
}

}  // namespace cltune
