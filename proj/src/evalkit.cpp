#include "it3d/evalkit.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace it3d {

ViewsPP views_pp_exact(std::int64_t iterations, std::int64_t batch_size, std::int64_t num_prompts) {
  if (num_prompts < 1) throw std::invalid_argument("views_pp: need at least one prompt");
  if (iterations < 0 || batch_size < 0) throw std::invalid_argument("views_pp: negative count");
  // Reduce before multiplying so large runs do not overflow.
  const std::int64_t g1 = std::gcd(iterations, num_prompts);
  const std::int64_t it = g1 ? iterations / g1 : 0;
  std::int64_t den = g1 ? num_prompts / g1 : num_prompts;
  const std::int64_t g2 = std::gcd(batch_size, den);
  const std::int64_t b = g2 ? batch_size / g2 : 0;
  den = g2 ? den / g2 : den;
  std::int64_t num = 0;
  if (__builtin_mul_overflow(it, b, &num)) throw std::overflow_error("views_pp: product overflows");
  if (num == 0) den = 1;
  return {num, den};
}

double views_pp(std::int64_t iterations, std::int64_t batch_size, std::int64_t num_prompts) {
  return views_pp_exact(iterations, batch_size, num_prompts).value();
}

std::vector<CameraPose> eval_poses(Index views) {
  if (views < 1) throw std::invalid_argument("eval_poses: need at least one view");
  std::vector<CameraPose> poses;
  for (Index v = 0; v < views; ++v) {
    CameraPose p;
    p.polar = 90.0;
    p.radius = 3.3;
    p.azimuth = 360.0 * double(v) / double(views);
    if (p.azimuth > 180.0) p.azimuth -= 360.0;
    poses.push_back(p);
  }
  return poses;
}

namespace {

double cosine(const Tensord& a, const Eigen::Ref<const Eigen::ArrayXd>& b) {
  const double na = std::sqrt(a.array().square().sum()), nb = std::sqrt(b.square().sum());
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("retrieval: zero feature vector");
  return (a.array() * b).sum() / (na * nb);
}

}  // namespace

RetrievalScores retrieval_scores(const std::vector<std::vector<Tensord>>& image_features,
                                 const Tensord& text_features, double logit_scale) {
  const Index n = Index(image_features.size());
  if (n == 0) throw std::invalid_argument("retrieval: empty query set");
  if (text_features.rank() != 2 || text_features.dim(0) != n)
    throw std::invalid_argument("retrieval: text features must be [N, D] with one row per prompt");
  const Index d = text_features.dim(1);
  std::vector<Eigen::ArrayXd> rows(static_cast<std::size_t>(n), Eigen::ArrayXd(d));
  for (Index j = 0; j < n; ++j) {
    for (Index k = 0; k < d; ++k) rows[std::size_t(j)][k] = text_features[j * d + k];
  }

  RetrievalScores out;
  for (Index i = 0; i < n; ++i) {
    const auto& views = image_features[std::size_t(i)];
    if (views.empty()) throw std::invalid_argument("retrieval: prompt without views");
    Eigen::ArrayXd mean_sim = Eigen::ArrayXd::Zero(n);
    double p_sum = 0.0;
    for (const Tensord& f : views) {
      if (f.size() != d) throw std::invalid_argument("retrieval: image/text feature size mismatch");
      Eigen::ArrayXd logits(n);
      for (Index j = 0; j < n; ++j) logits[j] = logit_scale * cosine(f, rows[std::size_t(j)]);
      mean_sim += logits;
      const Eigen::ArrayXd e = (logits - logits.maxCoeff()).exp();
      p_sum += e[i] / e.sum();
    }
    out.per_prompt.push_back(p_sum / double(views.size()));
    Index rank = 1;
    for (Index j = 0; j < n; ++j) rank += mean_sim[j] > mean_sim[i];
    out.ranks.push_back(rank);
  }
  out.clip_rp = std::accumulate(out.per_prompt.begin(), out.per_prompt.end(), 0.0) / double(n);
  return out;
}

Tensord target_text_features(const std::vector<const PromptRecord*>& query, const SyntheticOracle& oracle,
                             FeatureOracle& features, Index hw) {
  if (query.empty()) throw std::invalid_argument("target_text_features: empty query set");
  const CameraPose front = eval_poses().front();
  Tensord out;
  for (std::size_t i = 0; i < query.size(); ++i) {
    const Tensord f = features.features(oracle.target(*query[i], front, hw, hw));
    if (i == 0) out = Tensord({Index(query.size()), f.size()});
    for (Index k = 0; k < f.size(); ++k) out[Index(i) * f.size() + k] = f[k];
  }
  return out;
}

RetrievalScores clip_rp(const TrainState& state, const std::vector<const PromptRecord*>& query, TextEncoder& text,
                        FeatureOracle& features, const Tensord& text_features, const EvalOptions& opts) {
  const auto poses = eval_poses(opts.views);
  std::vector<std::vector<Tensord>> image_features;
  for (const PromptRecord* r : query) {
    const TextCondition<double> cond = text.encode(r->text);
    std::vector<Tensord> views;
    for (const Tensord& img :
         render_views(state, cond, poses, opts.hw, opts.noise_seed, std::nullopt, opts.n_uniform, opts.n_importance)
             .images) {
      views.push_back(features.features(img));
    }
    image_features.push_back(std::move(views));
  }
  return retrieval_scores(image_features, text_features, opts.logit_scale);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: size mismatch");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string report_json(const EvalReport& r) {
  nlohmann::json j = {{"views_pp", r.views_pp}, {"clip_rp", r.clip_rp}};
  nlohmann::json prompts = nlohmann::json::array();
  for (std::size_t i = 0; i < r.prompt_ids.size(); ++i) {
    prompts.push_back({{"id", r.prompt_ids[i]}, {"rank", r.ranks.at(i)}, {"probability", r.per_prompt.at(i)}});
  }
  j["prompts"] = prompts;
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& s : r.curve) curve.push_back({{"step", s.step}, {"views_pp", s.views_pp}, {"clip_rp", s.clip_rp}});
  j["curve"] = curve;
  return j.dump(2) + "\n";
}

std::string curve_csv(const std::vector<CurveSample>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "step,views_pp,clip_rp\n";
  for (const auto& s : curve) os << s.step << ',' << s.views_pp << ',' << s.clip_rp << '\n';
  return os.str();
}

}  // namespace it3d
