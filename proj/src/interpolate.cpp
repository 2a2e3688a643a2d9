#include "nbrew/interpolate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "nbrew/error.hpp"
#include "nbrew/metrics.hpp"

namespace nbrew::interp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

WeightVector asr_weights() { return {1.0, 0.0, 0.0, 0.0}; }

double combine(const SignalVector& signals, std::span<const double> w) {
  if (w.size() != kSignals)
    throw UsageError(fmt::format("weight vector has {} entries, expected {}", w.size(), kSignals));
  const auto v = signals.values();
  double score = 0.0;
  for (std::size_t k = 0; k < kSignals; ++k) score += w[k] * v[k];
  return score;
}

std::size_t select(const RecordSignals& record, std::span<const double> w) {
  if (record.rows.empty()) throw InputError("record " + record.query_id + " has no candidate rows");
  std::size_t best = 0;
  double best_score = combine(record.rows[0].signals, w);
  for (std::size_t i = 1; i < record.rows.size(); ++i) {
    const double s = combine(record.rows[i].signals, w);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

double corpus_wer(std::span<const RecordSignals> records, std::span<const double> w) {
  metrics::ErrorTally tally;
  for (const auto& r : records) tally.add(metrics::edit_stats(r.rows[select(r, w)].text, r.reference));
  return tally.rate();
}

// ---------------------------------------------------------------------------
// Powell's direction-set method

namespace {

struct BudgetExhausted {};

class Minimizer {
 public:
  Minimizer(const Objective& f, const PowellOptions& opt) : f_(f), opt_(opt) {}

  double eval(const WeightVector& x) {
    if (evaluations_ >= opt_.max_evals) throw BudgetExhausted{};
    ++evaluations_;
    const double v = f_(x);
    if (!best_ || v < best_value_) {
      best_ = x;
      best_value_ = v;
    }
    return v;
  }

  // Moves p to the minimum along xi; fret holds f(p) on entry and exit.
  void line_minimize(WeightVector& p, const WeightVector& xi, double& fret) {
    auto g = [&](double t) {
      WeightVector x = p;
      for (std::size_t k = 0; k < x.size(); ++k) x[k] += t * xi[k];
      return eval(x);
    };
    double t_best = 0.0;
    double f_best = fret;
    if (opt_.coarse_steps.empty()) {
      double a = 0.0, b = 1.0, c = 0.0, fa = fret, fb = 0.0, fc = 0.0;
      fb = g(b);
      bracket(g, a, b, c, fa, fb, fc);
      brent(g, a, b, c, fb, t_best, f_best);
    } else {
      std::vector<double> ts = opt_.coarse_steps;
      ts.push_back(0.0);
      std::sort(ts.begin(), ts.end());
      ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
      std::vector<double> fs(ts.size());
      std::size_t best_i = 0;
      for (std::size_t i = 0; i < ts.size(); ++i) {
        fs[i] = ts[i] == 0.0 ? fret : g(ts[i]);
        // strict improvement only, and prefer the shortest step among equals
        if (fs[i] < fs[best_i] || (fs[i] == fs[best_i] && std::abs(ts[i]) < std::abs(ts[best_i]))) best_i = i;
      }
      t_best = ts[best_i];
      f_best = fs[best_i];
      if (f_best < fret) {
        const double lo = best_i > 0 ? ts[best_i - 1] : ts[best_i];
        const double hi = best_i + 1 < ts.size() ? ts[best_i + 1] : ts[best_i];
        double t = t_best, ft = f_best;
        if (hi > lo) brent(g, lo, t_best, hi, f_best, t, ft);
        if (ft < f_best) {
          t_best = t;
          f_best = ft;
        }
      }
    }
    if (f_best < fret) {
      for (std::size_t k = 0; k < p.size(); ++k) p[k] += t_best * xi[k];
      fret = f_best;
    }
  }

  std::size_t evaluations() const { return evaluations_; }
  const WeightVector& best() const { return *best_; }
  double best_value() const { return best_value_; }

 private:
  // Grows [a, c] around b until f(b) <= f(a), f(c).
  template <class G>
  void bracket(G& g, double& a, double& b, double& c, double& fa, double& fb, double& fc) {
    constexpr double kGold = 1.618034, kLimit = 100.0, kTiny = 1e-20;
    if (fb > fa) {
      std::swap(a, b);
      std::swap(fa, fb);
    }
    c = b + kGold * (b - a);
    fc = g(c);
    while (fb > fc) {
      const double r = (b - a) * (fb - fc);
      const double q = (b - c) * (fb - fa);
      const double diff = std::max(std::abs(q - r), kTiny);
      double u = b - ((b - c) * q - (b - a) * r) / (2.0 * std::copysign(diff, q - r));
      const double ulim = b + kLimit * (c - b);
      double fu = 0.0;
      if ((b - u) * (u - c) > 0.0) {
        fu = g(u);
        if (fu < fc) {
          a = b;
          b = u;
          fa = fb;
          fb = fu;
          return;
        }
        if (fu > fb) {
          c = u;
          fc = fu;
          return;
        }
        u = c + kGold * (c - b);
        fu = g(u);
      } else if ((c - u) * (u - ulim) > 0.0) {
        fu = g(u);
        if (fu < fc) {
          b = c;
          c = u;
          u = c + kGold * (c - b);
          fb = fc;
          fc = fu;
          fu = g(u);
        }
      } else if ((u - ulim) * (ulim - c) >= 0.0) {
        u = ulim;
        fu = g(u);
      } else {
        u = c + kGold * (c - b);
        fu = g(u);
      }
      a = b;
      b = c;
      c = u;
      fa = fb;
      fb = fc;
      fc = fu;
    }
  }

  // Brent's parabolic/golden-section search on [min(a,c), max(a,c)] from b.
  template <class G>
  void brent(G& g, double ax, double bx, double cx, double fbx, double& xmin, double& fmin) {
    constexpr double kGoldRatio = 0.3819660, kZeps = 1e-18, kTol = 3e-8;
    double a = std::min(ax, cx), b = std::max(ax, cx);
    double x = bx, w = bx, v = bx;
    double fx = fbx, fw = fbx, fv = fbx;
    double d = 0.0, e = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      const double xm = 0.5 * (a + b);
      const double tol1 = kTol * std::abs(x) + kZeps;
      const double tol2 = 2.0 * tol1;
      if (std::abs(x - xm) <= tol2 - 0.5 * (b - a)) break;
      if (std::abs(e) > tol1) {
        const double r = (x - w) * (fx - fv);
        double q = (x - v) * (fx - fw);
        double p = (x - v) * q - (x - w) * r;
        q = 2.0 * (q - r);
        if (q > 0.0) p = -p;
        q = std::abs(q);
        const double etemp = e;
        e = d;
        if (std::abs(p) >= std::abs(0.5 * q * etemp) || p <= q * (a - x) || p >= q * (b - x)) {
          e = x >= xm ? a - x : b - x;
          d = kGoldRatio * e;
        } else {
          d = p / q;
          const double u = x + d;
          if (u - a < tol2 || b - u < tol2) d = std::copysign(tol1, xm - x);
        }
      } else {
        e = x >= xm ? a - x : b - x;
        d = kGoldRatio * e;
      }
      const double u = std::abs(d) >= tol1 ? x + d : x + std::copysign(tol1, d);
      const double fu = g(u);
      if (fu <= fx) {
        if (u >= x) {
          a = x;
        } else {
          b = x;
        }
        v = w;
        w = x;
        x = u;
        fv = fw;
        fw = fx;
        fx = fu;
      } else {
        if (u < x) {
          a = u;
        } else {
          b = u;
        }
        if (fu <= fw || w == x) {
          v = w;
          w = u;
          fv = fw;
          fw = fu;
        } else if (fu <= fv || v == x || v == w) {
          v = u;
          fv = fu;
        }
      }
    }
    xmin = x;
    fmin = fx;
  }

  const Objective& f_;
  const PowellOptions& opt_;
  std::size_t evaluations_ = 0;
  std::optional<WeightVector> best_;
  double best_value_ = kInf;
};

}  // namespace

PowellResult powell_optimize(const Objective& objective, const WeightVector& w0, const PowellOptions& options) {
  if (w0.empty()) throw UsageError("powell_optimize: empty starting point");
  for (double v : w0)
    if (!std::isfinite(v)) throw UsageError("powell_optimize: non-finite starting point");
  const std::size_t n = w0.size();
  Minimizer m(objective, options);
  PowellResult result;
  std::vector<WeightVector> dirs(n, WeightVector(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) dirs[i][i] = 1.0;

  WeightVector p = w0;
  try {
    double fret = m.eval(p);
    result.initial_value = fret;
    WeightVector pt = p;
    for (std::size_t iter = 1;; ++iter) {
      result.iterations = iter;
      const double fp = fret;
      std::size_t ibig = 0;
      double del = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double before = fret;
        m.line_minimize(p, dirs[i], fret);
        if (before - fret > del) {
          del = before - fret;
          ibig = i;
        }
      }
      result.trace.push_back(fret);
      if (fp - fret <= options.tol) break;
      if (iter >= options.max_iters) {
        result.hit_limit = true;
        break;
      }
      WeightVector ptt(n), xit(n);
      double norm = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        ptt[k] = 2.0 * p[k] - pt[k];
        xit[k] = p[k] - pt[k];
        norm += xit[k] * xit[k];
      }
      pt = p;
      if (norm == 0.0) continue;
      if (!options.coarse_steps.empty())
        for (double& x : xit) x /= std::sqrt(norm);
      const double fptt = m.eval(ptt);
      if (fptt < fp) {
        const double t = 2.0 * (fp - 2.0 * fret + fptt) * (fp - fret - del) * (fp - fret - del) -
                         del * (fp - fptt) * (fp - fptt);
        if (t < 0.0) {
          m.line_minimize(p, xit, fret);
          dirs[ibig] = dirs[n - 1];
          dirs[n - 1] = xit;
        }
      }
    }
  } catch (const BudgetExhausted&) {
    result.hit_limit = true;
  }
  result.w = m.best();
  result.value = m.best_value();
  result.evaluations = m.evaluations();
  return result;
}

std::vector<double> log_spaced_steps(double smallest, double largest, std::size_t per_sign) {
  if (!(smallest > 0.0) || !(largest >= smallest) || per_sign == 0)
    throw UsageError("log_spaced_steps: need 0 < smallest <= largest and at least one step");
  std::vector<double> out;
  for (std::size_t i = 0; i < per_sign; ++i) {
    const double frac = per_sign == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(per_sign - 1);
    const double s = smallest * std::pow(largest / smallest, frac);
    out.push_back(s);
    out.push_back(-s);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TuneResult tune_weights(std::span<const RecordSignals> dev, const WeightVector& w0, PowellOptions options) {
  if (dev.empty()) throw InputError("tune_weights: empty dev set");
  if (w0.size() != kSignals) throw UsageError("tune_weights: starting point must have one weight per signal");
  if (options.coarse_steps.empty()) options.coarse_steps = log_spaced_steps(0.01, 100.0, 15);
  TuneResult out;
  out.powell = powell_optimize([&](std::span<const double> w) { return corpus_wer(dev, w); }, w0, options);
  out.w = out.powell.w;
  out.initial_wer = out.powell.initial_value;
  out.wer = out.powell.value;
  return out;
}

// ---------------------------------------------------------------------------
// Thresholds

double threshold_wer(std::span<const ThresholdCase> cases, double threshold_r, double threshold_w) {
  metrics::ErrorTally tally;
  for (const auto& c : cases) {
    const auto decision = rewrite_decide(c.decode, c.decoded_text, c.scores, c.record, threshold_r, threshold_w);
    tally.add(metrics::edit_stats(decision.text, c.record.reference));
  }
  return tally.rate();
}

ThresholdSearchResult grid_search_thresholds(std::span<const ThresholdCase> in_domain,
                                             std::span<const ThresholdCase> all_domain, std::span<const double> grid) {
  if (in_domain.empty() || all_domain.empty()) throw InputError("threshold search needs non-empty dev sets");
  for (double g : grid)
    if (std::isnan(g) || g == -kInf) throw UsageError("threshold grid values must be finite or +infinity");
  std::vector<double> values(grid.begin(), grid.end());
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  ThresholdSearchResult out;
  out.baseline_in_domain_wer = threshold_wer(in_domain, kInf, kInf);
  out.baseline_all_domain_wer = threshold_wer(all_domain, kInf, kInf);
  out.in_domain_wer = out.baseline_in_domain_wer;
  out.all_domain_wer = out.baseline_all_domain_wer;

  // Stage 1: threshold_R alone (rewrite disabled).
  bool found = false;
  double best_r = kInf, best_in = kInf, best_all = kInf;
  for (double r : values) {
    const double all = threshold_wer(all_domain, r, kInf);
    if (all > out.baseline_all_domain_wer) continue;
    const double in = threshold_wer(in_domain, r, kInf);
    if (!found || in <= best_in) {  // ascending grid: ties keep the larger threshold
      found = true;
      best_r = r;
      best_in = in;
      best_all = all;
    }
  }
  if (!found) return out;
  out.feasible = true;
  out.threshold_r = best_r;
  out.threshold_w = kInf;
  out.in_domain_wer = best_in;
  out.all_domain_wer = best_all;

  // Stage 2: threshold_W > threshold_R; W = +inf stays the default.
  for (double w : values) {
    if (!(w > best_r) || std::isinf(w)) continue;
    const double all = threshold_wer(all_domain, best_r, w);
    if (all > out.baseline_all_domain_wer) continue;
    const double in = threshold_wer(in_domain, best_r, w);
    if (in < out.in_domain_wer) {
      out.threshold_w = w;
      out.in_domain_wer = in;
      out.all_domain_wer = all;
    }
  }
  return out;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> out;
  for (int i = -30; i <= 0; ++i) out.push_back(static_cast<double>(i) / 10.0);
  return out;
}

// ---------------------------------------------------------------------------
// Files

void write_signals(std::span<const RecordSignals> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
      rows.push_back({{"text", join_words(row.text)},
                      {"am", row.signals.acoustic_logp},
                      {"lm", row.signals.firstpass_lm_logp},
                      {"resc", row.signals.rescorer_logp},
                      {"lmc", row.signals.lm_cost_plus},
                      {"injected", row.injected}});
    }
    const nlohmann::json line = {{"id", r.query_id}, {"ref", join_words(r.reference)}, {"rows", rows}};
    out << line.dump() << '\n';
  }
  if (!out) throw InputError("failed writing " + path.string());
}

std::vector<RecordSignals> read_signals(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<RecordSignals> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RecordSignals r;
      r.query_id = j.at("id").get<std::string>();
      r.reference = split_words(j.at("ref").get<std::string>());
      for (const auto& row : j.at("rows")) {
        CandidateRow c;
        c.text = split_words(row.at("text").get<std::string>());
        c.signals.acoustic_logp = row.at("am").get<double>();
        c.signals.firstpass_lm_logp = row.at("lm").get<double>();
        c.signals.rescorer_logp = row.at("resc").get<double>();
        c.signals.lm_cost_plus = row.at("lmc").get<double>();
        c.injected = row.value("injected", false);
        r.rows.push_back(std::move(c));
      }
      if (r.rows.empty()) throw ParseError("signals record has no rows", lineno);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("signals: ") + e.what(), lineno);
    }
  }
  return out;
}

KeyValueConfig weights_to_kv(std::span<const double> w) {
  if (w.size() != kSignals) throw UsageError("weights_to_kv: wrong dimension");
  KeyValueConfig kv;
  kv.set("w_am", fmt::format("{:.17g}", w[0]));
  kv.set("w_lm", fmt::format("{:.17g}", w[1]));
  kv.set("w_resc", fmt::format("{:.17g}", w[2]));
  kv.set("w_lmc", fmt::format("{:.17g}", w[3]));
  return kv;
}

WeightVector weights_from_kv(const KeyValueConfig& kv) {
  WeightVector w;
  for (const char* key : {"w_am", "w_lm", "w_resc", "w_lmc"}) {
    if (!kv.contains(key)) throw ConfigError(std::string("weights file lacks ") + key);
    w.push_back(kv.get_double(key, 0.0));
  }
  return w;
}

}  // namespace nbrew::interp
