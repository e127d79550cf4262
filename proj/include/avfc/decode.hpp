#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfc/encoder.hpp"
#include "avfc/graph.hpp"

namespace avfc {

// ------------------------------------------------------------------ tokenizer

struct TokenRange {
  int start = 0;
  int length = 0;
  bool contains(int id) const { return id >= start && id < start + length; }
};

struct Language {
  std::string id;
  TokenRange range;
  std::string inventory;  // one byte per token, in id order
};

/// Aggregated character tokenizer: each language owns a contiguous,
/// disjoint id range; the blank id sits after every range.
class TokenizerSpec {
 public:
  TokenizerSpec() = default;

  /// Assigns ranges in the given order starting at id 0.
  static TokenizerSpec build(const std::vector<std::pair<std::string, std::string>>& languages) {
    TokenizerSpec s;
    int next = 0;
    for (const auto& [id, inv] : languages) {
      s.languages_.push_back({id, {next, static_cast<int>(inv.size())}, inv});
      next += static_cast<int>(inv.size());
    }
    s.blank_ = next;
    s.validate();
    return s;
  }

  int blank() const { return blank_; }
  int vocab_size() const { return blank_; }
  const std::vector<Language>& languages() const { return languages_; }

  const Language& language(const std::string& lang) const {
    for (const auto& l : languages_)
      if (l.id == lang) return l;
    throw std::invalid_argument("unknown language '" + lang + "'");
  }
  TokenRange range(const std::string& lang) const { return language(lang).range; }

  std::vector<int> encode(const std::string& text, const std::string& lang) const {
    const Language& l = language(lang);
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char ch : text) {
      const auto pos = l.inventory.find(ch);
      if (pos == std::string::npos) {
        throw std::invalid_argument("character '" + std::string(1, ch) + "' is not in the '" + lang +
                                    "' inventory");
      }
      ids.push_back(l.range.start + static_cast<int>(pos));
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      const Language* hit = nullptr;
      for (const auto& l : languages_)
        if (l.range.contains(id)) hit = &l;
      if (!hit) throw std::invalid_argument("token id " + std::to_string(id) + " is outside every language range");
      out.push_back(hit->inventory[id - hit->range.start]);
    }
    return out;
  }

  /// Text form: "blank <id>" header, then "<lang> <start> <length> <inventory>" lines.
  std::string to_text() const {
    std::ostringstream os;
    os << "blank " << blank_ << "\n";
    for (const auto& l : languages_) os << l.id << ' ' << l.range.start << ' ' << l.range.length << ' ' << l.inventory << "\n";
    return os.str();
  }

  static TokenizerSpec from_text(const std::string& text) {
    std::istringstream is(text);
    std::string word;
    TokenizerSpec s;
    if (!(is >> word >> s.blank_) || word != "blank") throw std::invalid_argument("tokenizer: missing blank header");
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      Language l;
      if (!(ls >> l.id >> l.range.start >> l.range.length)) throw std::invalid_argument("tokenizer: bad line '" + line + "'");
      ls.get();
      std::getline(ls, l.inventory);
      s.languages_.push_back(std::move(l));
    }
    s.validate();
    return s;
  }

  void save(const std::filesystem::path& p) const {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << to_text();
  }
  static TokenizerSpec load(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
  }

  bool operator==(const TokenizerSpec& o) const { return to_text() == o.to_text(); }

 private:
  void validate() const {
    if (languages_.empty()) throw std::invalid_argument("tokenizer: no languages");
    int next = 0;
    for (const auto& l : languages_) {
      if (l.range.start != next) throw std::invalid_argument("tokenizer: ranges of '" + l.id + "' not contiguous");
      if (l.range.length <= 0 || static_cast<std::size_t>(l.range.length) != l.inventory.size()) {
        throw std::invalid_argument("tokenizer: range length of '" + l.id + "' does not match its inventory");
      }
      for (std::size_t i = 0; i < l.inventory.size(); ++i) {
        const char ch = l.inventory[i];
        if (ch == ' ' || ch == '\n' || l.inventory.find(ch, i + 1) != std::string::npos) {
          throw std::invalid_argument("tokenizer: inventory of '" + l.id + "' has a duplicate or blank character");
        }
      }
      next += l.range.length;
    }
    if (blank_ != next) throw std::invalid_argument("tokenizer: blank id must follow the last range");
  }

  std::vector<Language> languages_;
  int blank_ = 0;
};

struct Hypothesis {
  std::vector<int> ids;
  double score = 0.0;
  std::string text;
  std::size_t joint_evaluations = 0;
};

// ------------------------------------------------------------------ CTC greedy

/// Per-frame argmax (restricted to blank and `range` when given), collapse
/// repeats, drop blanks.
template <class Real>
std::vector<int> ctc_greedy(const Tensor<Real>& logits, int blank, std::optional<TokenRange> range = std::nullopt) {
  std::vector<int> out;
  const std::size_t T = logits.rows(), K = logits.cols();
  int prev = -1;
  for (std::size_t t = 0; t < T; ++t) {
    const Real* row = logits.data() + t * K;
    int best = blank;
    Real best_v = row[blank];
    for (std::size_t k = 0; k < K; ++k) {
      const int id = static_cast<int>(k);
      if (id == blank || (range && !range->contains(id))) continue;
      if (row[k] > best_v) {
        best_v = row[k];
        best = id;
      }
    }
    if (best != blank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

// ------------------------------------------------------------------ prediction and joint networks

template <class Real>
void add_decoder_params(ParameterSet<Real>& p, const ModelConfig& c, Rng& rng) {
  const std::size_t E = c.pred_embed, H = c.decoder_hidden, J = c.joint_dim, K = c.classes();
  p.add("pred.embed", glorot<Real>({K, E}, K, E, rng));
  p.add("pred.lstm.w_ih", glorot<Real>({E, 4 * H}, E, 4 * H, rng));
  p.add("pred.lstm.w_hh", glorot<Real>({H, 4 * H}, H, 4 * H, rng));
  p.add("pred.lstm.b", Tensor<Real>({4 * H}));
  add_linear_params(p, "joint.enc", std::size_t(c.d_model), J, rng);
  add_linear_params(p, "joint.pred", H, J, rng);
  add_linear_params(p, "joint.out", J, K, rng);
}

/// Embedding (V+1 rows, the blank row doubles as start symbol), one LSTM
/// layer, joint projections: d*J + J + H*J + J + J*(V+1) + (V+1).
inline std::size_t decoder_param_count(const ModelConfig& c) {
  const std::size_t E = c.pred_embed, H = c.decoder_hidden, J = c.joint_dim, K = c.classes(), d = c.d_model;
  return K * E + E * 4 * H + H * 4 * H + 4 * H + d * J + J + H * J + J + J * K + K;
}

/// Prediction network over [blank, y_1 .. y_U] -> [(U+1) x H].
template <class Real>
typename Graph<Real>::Id prediction_network(Graph<Real>& g, const std::vector<int>& target, int blank) {
  std::vector<int> ids{blank};
  ids.insert(ids.end(), target.begin(), target.end());
  auto emb = g.embedding(g.parameter("pred.embed"), ids);
  return g.lstm(emb, g.parameter("pred.lstm.w_ih"), g.parameter("pred.lstm.w_hh"), g.parameter("pred.lstm.b"));
}

/// Additive joint: tanh(W_e enc_t + W_p pred_u) -> V+1 logits, laid out
/// [T x (U+1) x (V+1)].
template <class Real>
typename Graph<Real>::Id joint_network(Graph<Real>& g, typename Graph<Real>::Id enc, typename Graph<Real>::Id pred) {
  const std::size_t T = g.shape(enc)[0], U1 = g.shape(pred)[0];
  auto z = g.tanh(g.outer_add(linear(g, enc, "joint.enc"), linear(g, pred, "joint.pred")));
  auto logits = linear(g, z, "joint.out");
  return g.reshape(logits, {T, U1, g.shape(logits)[1]});
}

// ------------------------------------------------------------------ RNN-T greedy

namespace detail {

/// Graph-free single-step evaluation of the prediction network and joint.
template <class Real>
class TransducerStepper {
 public:
  explicit TransducerStepper(const ParameterSet<Real>& p)
      : emb_(p.at("pred.embed")),
        wih_(p.at("pred.lstm.w_ih")),
        whh_(p.at("pred.lstm.w_hh")),
        b_(p.at("pred.lstm.b")),
        jew_(p.at("joint.enc.w")),
        jeb_(p.at("joint.enc.b")),
        jpw_(p.at("joint.pred.w")),
        jpb_(p.at("joint.pred.b")),
        jow_(p.at("joint.out.w")),
        job_(p.at("joint.out.b")) {
    H_ = whh_.dim(0);
  }

  std::size_t joint_dim() const { return jew_.dim(1); }

  /// Encoder rows projected into the joint space: [T x J].
  RowMat<Real> project_encoder(const Tensor<Real>& enc) const {
    const std::size_t T = enc.rows(), d = enc.cols(), J = jew_.dim(1);
    RowMat<Real> out = ConstMatMap<Real>(enc.data(), T, d) * ConstMatMap<Real>(jew_.data(), d, J);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < J; ++j) out(t, j) += jeb_[j];
    return out;
  }

  /// Advances the LSTM by one token; returns the new hidden state projected
  /// into the joint space.
  std::vector<Real> step(int token, std::vector<Real>& h, std::vector<Real>& c) const {
    const std::size_t E = emb_.dim(1), H4 = 4 * H_;
    std::vector<Real> z(H4);
    for (std::size_t j = 0; j < H4; ++j) {
      Real s = b_[j];
      for (std::size_t e = 0; e < E; ++e) s += emb_[token * E + e] * wih_[e * H4 + j];
      for (std::size_t m = 0; m < H_; ++m) s += h[m] * whh_[m * H4 + j];
      z[j] = s;
    }
    for (std::size_t m = 0; m < H_; ++m) {
      const Real ig = sigmoid(z[m]), fg = sigmoid(z[H_ + m]), gg = std::tanh(z[2 * H_ + m]), og = sigmoid(z[3 * H_ + m]);
      c[m] = fg * c[m] + ig * gg;
      h[m] = og * std::tanh(c[m]);
    }
    const std::size_t J = jpw_.dim(1);
    std::vector<Real> pj(J);
    for (std::size_t j = 0; j < J; ++j) {
      Real s = jpb_[j];
      for (std::size_t m = 0; m < H_; ++m) s += h[m] * jpw_[m * J + j];
      pj[j] = s;
    }
    return pj;
  }

  /// Log-softmax of the joint output at one lattice node.
  std::vector<double> joint(const Real* enc_row, const std::vector<Real>& pred_row) const {
    const std::size_t J = jow_.dim(0), K = jow_.dim(1);
    std::vector<Real> hid(J);
    for (std::size_t j = 0; j < J; ++j) hid[j] = std::tanh(enc_row[j] + pred_row[j]);
    std::vector<double> out(K);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      Real s = job_[k];
      for (std::size_t j = 0; j < J; ++j) s += hid[j] * jow_[j * K + k];
      out[k] = s;
      mx = std::max(mx, out[k]);
    }
    double z = 0;
    for (double v : out) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (double& v : out) v -= lz;
    return out;
  }

  std::size_t hidden() const { return H_; }

 private:
  const Tensor<Real>&emb_, &wih_, &whh_, &b_, &jew_, &jeb_, &jpw_, &jpb_, &jow_, &job_;
  std::size_t H_ = 0;
};

}  // namespace detail

/// Greedy transducer search: at each frame emit the best symbol among blank
/// and the language range; labels advance the prediction network, blank
/// advances time; at most max_symbols labels per frame.
template <class Real>
Hypothesis rnnt_greedy(const Tensor<Real>& encoder_out, const ParameterSet<Real>& params, int blank,
                       std::optional<TokenRange> range = std::nullopt, int max_symbols_per_frame = 10) {
  Hypothesis hyp;
  const std::size_t T = encoder_out.rows();
  if (T == 0) return hyp;
  detail::TransducerStepper<Real> net(params);
  const auto enc = net.project_encoder(encoder_out);
  std::vector<Real> h(net.hidden(), Real(0)), c(net.hidden(), Real(0));
  auto pred = net.step(blank, h, c);
  for (std::size_t t = 0; t < T; ++t) {
    for (int emitted = 0;; ++emitted) {
      const auto lp = net.joint(enc.data() + t * enc.cols(), pred);
      ++hyp.joint_evaluations;
      int best = blank;
      for (std::size_t k = 0; k < lp.size(); ++k) {
        const int id = static_cast<int>(k);
        if (id == blank || (range && !range->contains(id))) continue;
        if (lp[k] > lp[best]) best = id;
      }
      if (best == blank || emitted >= max_symbols_per_frame) {
        hyp.score += lp[blank];
        break;
      }
      hyp.score += lp[best];
      hyp.ids.push_back(best);
      pred = net.step(best, h, c);
    }
  }
  return hyp;
}

}  // namespace avfc
