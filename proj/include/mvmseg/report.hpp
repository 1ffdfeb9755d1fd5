#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mvmseg/pipeline.hpp"

namespace mvmseg {

namespace report_detail {

// full round-trip precision so regenerating a report from saved artifacts
// reproduces it byte for byte
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// shorter form for the human-facing summary tables
inline std::string fmt10(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream os(path, std::ios::binary);  // binary: no platform newline translation
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  return os;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1));
}

}  // namespace report_detail

/// Writes one fold's evaluation rows under dir/: Dice tables at the three
/// aggregation levels, peak values from predicted and ground-truth masks,
/// per-slice velocity curves and contour exports, and wall-clock timings
/// (timing.csv is the one file excluded from byte-level comparisons).
inline void write_fold_artifacts(const std::string& dir, const FoldEval& ev) {
  namespace rd = report_detail;
  std::filesystem::create_directories(dir);
  {
    auto os = rd::open_out(dir + "/dice_frames.csv");
    os << "subject,slice,frame,dice,unrecoverable,fell_back\n";
    for (const auto& f : ev.frames)
      os << f.subject << "," << f.slice << "," << f.frame << "," << rd::fmt(f.dice_raw) << "," << int(f.unrecoverable)
         << "," << int(f.fell_back) << "\n";
  }
  {
    auto os = rd::open_out(dir + "/dice_slices.csv");
    os << "subject,slice,dice_pooled,dice_mean\n";
    for (const auto& s : ev.slices)
      os << s.subject << "," << s.slice << "," << rd::fmt(s.dice_pooled_slice) << "," << rd::fmt(s.dice_mean_slice) << "\n";
  }
  {
    auto os = rd::open_out(dir + "/dice_subjects.csv");
    os << "subject,dice_pooled,dice_mean\n";
    for (const auto& s : ev.subjects)
      os << s.subject << "," << rd::fmt(s.dice_pooled_subject) << "," << rd::fmt(s.dice_mean_subject) << "\n";
  }
  {
    auto os = rd::open_out(dir + "/peaks.csv");
    os << "subject,slice,source,ps,ps_frame,pd,pd_frame,pas,pas_frame,ps_flag,pd_flag,pas_flag,velocity_ok\n";
    for (const auto& s : ev.slices) {
      auto row = [&](const char* source, const PeakSet& p, bool ok) {
        os << s.subject << "," << s.slice << "," << source << "," << rd::fmt(p.ps.value) << "," << p.ps.frame << ","
           << rd::fmt(p.pd.value) << "," << p.pd.frame << "," << rd::fmt(p.pas.value) << "," << p.pas.frame << ","
           << int(p.ps_sign_violation) << "," << int(p.pd_sign_violation) << "," << int(p.pas_sign_violation) << ","
           << int(ok) << "\n";
      };
      row("pred", s.pred_peaks, s.velocity_ok);
      row("gt", s.gt_peaks, true);
    }
  }
  {
    auto os = rd::open_out(dir + "/timing.csv");
    os << "subject,slice,seconds\n";
    for (const auto& s : ev.slices) os << s.subject << "," << s.slice << "," << rd::fmt(s.seconds) << "\n";
  }
  for (const auto& s : ev.slices) {
    const std::string tag = "subject" + std::to_string(s.subject) + "_slice" + std::to_string(s.slice);
    auto write_curve = [&](const std::string& path, const VelocityCurve& c) {
      auto os = rd::open_out(path);
      os << "frame,t_frac,velocity\n";
      for (int t = 0; t < c.frames(); ++t)
        os << t << "," << rd::fmt(c.t_frac(t)) << "," << rd::fmt(c.v[std::size_t(t)]) << "\n";
    };
    write_curve(dir + "/curves/" + tag + "_gt.csv", s.gt_curve);
    if (s.velocity_ok) write_curve(dir + "/curves/" + tag + "_pred.csv", s.pred_curve);

    auto os = rd::open_out(dir + "/contours/" + tag + ".csv");
    os << "frame,contour,point_index,x,y\n";
    json ell = json::array();
    for (std::size_t t = 0; t < s.contours.size(); ++t) {
      if (s.frame_unrecoverable[t]) {
        ell.push_back(json{{"frame", int(t)}, {"unrecoverable", true}});
        continue;
      }
      const ContourResult& c = s.contours[t];
      for (std::size_t k = 0; k < c.epi_points.size(); ++k)
        os << t << ",epi," << k << "," << rd::fmt(c.epi_points[k].x) << "," << rd::fmt(c.epi_points[k].y) << "\n";
      for (std::size_t k = 0; k < c.endo_points.size(); ++k)
        os << t << ",endo," << k << "," << rd::fmt(c.endo_points[k].x) << "," << rd::fmt(c.endo_points[k].y) << "\n";
      auto ej = [](const Ellipse& e) {
        return json{{"cx", e.cx}, {"cy", e.cy}, {"a", e.a}, {"b", e.b}, {"theta", e.theta}};
      };
      ell.push_back(json{{"frame", int(t)},
                         {"epi", ej(c.epi)},
                         {"endo", ej(c.endo)},
                         {"fell_back", c.fell_back},
                         {"endo_inside_epi", c.endo_inside_epi}});
    }
    auto ejs = rd::open_out(dir + "/ellipses/" + tag + ".json");
    ejs << ell.dump(2) << "\n";
  }
}

/// Minimal fold-evaluation view reloaded from saved artifacts; everything
/// the cross-variant report needs.
struct LoadedFold {
  // key: subject, slice, frame
  std::vector<std::tuple<int, int, int, double>> frame_dice;
  std::vector<std::tuple<int, int, double>> slice_dice;  // pooled
  std::vector<std::pair<int, double>> subject_dice;      // pooled
  // per slice: (subject, slice) -> peaks, source "pred"/"gt"
  struct PeakRow {
    int subject, slice;
    std::string source;
    double ps, pd, pas;
    bool velocity_ok;
  };
  std::vector<PeakRow> peaks;
};

inline LoadedFold load_fold_artifacts(const std::string& dir) {
  namespace rd = report_detail;
  LoadedFold out;
  auto lines = [](const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing artifact " + path);
    std::vector<std::string> ls;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line))
      if (!line.empty()) ls.push_back(line);
    return ls;
  };
  for (const auto& l : lines(dir + "/dice_frames.csv")) {
    auto c = rd::split_csv_line(l);
    out.frame_dice.push_back({std::stoi(c[0]), std::stoi(c[1]), std::stoi(c[2]), std::strtod(c[3].c_str(), nullptr)});
  }
  for (const auto& l : lines(dir + "/dice_slices.csv")) {
    auto c = rd::split_csv_line(l);
    out.slice_dice.push_back({std::stoi(c[0]), std::stoi(c[1]), std::strtod(c[2].c_str(), nullptr)});
  }
  for (const auto& l : lines(dir + "/dice_subjects.csv")) {
    auto c = rd::split_csv_line(l);
    out.subject_dice.push_back({std::stoi(c[0]), std::strtod(c[1].c_str(), nullptr)});
  }
  for (const auto& l : lines(dir + "/peaks.csv")) {
    auto c = rd::split_csv_line(l);
    LoadedFold::PeakRow r;
    r.subject = std::stoi(c[0]);
    r.slice = std::stoi(c[1]);
    r.source = c[2];
    r.ps = std::strtod(c[3].c_str(), nullptr);
    r.pd = std::strtod(c[5].c_str(), nullptr);
    r.pas = std::strtod(c[7].c_str(), nullptr);
    r.velocity_ok = c[12] == "1";
    out.peaks.push_back(r);
  }
  return out;
}

/// Cross-variant summary: Dice mean/sd table at the three levels, the five
/// pairwise signed-rank comparisons at every level, predicted-vs-truth peak
/// correlations, and limits-of-agreement tables, with significance flagged
/// at p < 0.05. Variants missing from the input produce explicit gap rows.
inline void write_report(const std::string& report_dir, const std::map<std::string, std::vector<LoadedFold>>& by_variant,
                         double alpha = 0.05) {
  namespace rd = report_detail;
  std::filesystem::create_directories(report_dir);
  const std::vector<std::string> all_variants = {"a", "b", "c", "d"};

  // pooled per-level dice keyed for pairing
  std::map<std::string, std::map<std::tuple<int, int, int>, double>> frame_map;
  std::map<std::string, std::map<std::pair<int, int>, double>> slice_map;
  std::map<std::string, std::map<int, double>> subject_map;
  for (const auto& [variant, folds] : by_variant)
    for (const auto& f : folds) {
      for (const auto& [s, z, t, d] : f.frame_dice) frame_map[variant][{s, z, t}] = d;
      for (const auto& [s, z, d] : f.slice_dice) slice_map[variant][{s, z}] = d;
      for (const auto& [s, d] : f.subject_dice) subject_map[variant][s] = d;
    }

  {
    auto os = rd::open_out(report_dir + "/table1.csv");
    os << "level";
    for (const auto& v : all_variants) os << "," << v << "_mean," << v << "_sd," << v << "_n";
    os << "\n";
    auto emit_level = [&](const std::string& level, auto getter) {
      os << level;
      for (const auto& v : all_variants) {
        if (!by_variant.count(v)) {
          os << ",,,0";
          continue;
        }
        std::vector<double> vals = getter(v);
        os << "," << rd::fmt10(rd::mean_of(vals)) << "," << rd::fmt10(rd::sd_of(vals)) << "," << vals.size();
      }
      os << "\n";
    };
    emit_level("per_subject", [&](const std::string& v) {
      std::vector<double> vals;
      for (const auto& [k, d] : subject_map[v]) vals.push_back(d);
      return vals;
    });
    emit_level("per_slice", [&](const std::string& v) {
      std::vector<double> vals;
      for (const auto& [k, d] : slice_map[v]) vals.push_back(d);
      return vals;
    });
    emit_level("per_frame", [&](const std::string& v) {
      std::vector<double> vals;
      for (const auto& [k, d] : frame_map[v]) vals.push_back(d);
      return vals;
    });
  }

  {
    auto os = rd::open_out(report_dir + "/wilcoxon.csv");
    os << "model_x,model_y,level,n,w,p,significant,status\n";
    const std::vector<std::pair<std::string, std::string>> pairs = {{"a", "d"}, {"b", "d"}, {"c", "d"}, {"a", "c"}, {"b", "c"}};
    auto emit = [&](const std::string& x, const std::string& y, const std::string& level, const std::vector<double>& xs,
                    const std::vector<double>& ys, bool both_present) {
      os << x << "," << y << "," << level;
      if (!both_present) {
        os << ",0,,,," << "missing-variant\n";
        return;
      }
      try {
        auto r = wilcoxon_signed_rank(xs, ys);
        if (r.no_differences) {
          os << "," << xs.size() << ",,1,0,no-differences\n";
        } else {
          os << "," << r.n << "," << rd::fmt10(r.w) << "," << rd::fmt10(r.p) << "," << int(r.p < alpha) << ",ok\n";
        }
      } catch (const std::invalid_argument&) {
        os << "," << xs.size() << ",,,,insufficient-n\n";
      }
    };
    for (const auto& [x, y] : pairs) {
      const bool present = by_variant.count(x) && by_variant.count(y);
      std::vector<double> xs, ys;
      if (present)
        for (const auto& [k, d] : subject_map[x])
          if (subject_map[y].count(k)) {
            xs.push_back(d);
            ys.push_back(subject_map[y][k]);
          }
      emit(x, y, "per_subject", xs, ys, present);
      xs.clear();
      ys.clear();
      if (present)
        for (const auto& [k, d] : slice_map[x])
          if (slice_map[y].count(k)) {
            xs.push_back(d);
            ys.push_back(slice_map[y][k]);
          }
      emit(x, y, "per_slice", xs, ys, present);
      xs.clear();
      ys.clear();
      if (present)
        for (const auto& [k, d] : frame_map[x])
          if (frame_map[y].count(k)) {
            xs.push_back(d);
            ys.push_back(frame_map[y][k]);
          }
      emit(x, y, "per_frame", xs, ys, present);
    }
  }

  {
    auto pearson_os = rd::open_out(report_dir + "/pearson.csv");
    pearson_os << "variant,peak,n,r,p,significant,status\n";
    auto ba_os = rd::open_out(report_dir + "/ba_summary.csv");
    ba_os << "variant,peak,n,mean_diff,loa_low,loa_high,outliers,outlier_fraction\n";

    for (const auto& v : all_variants) {
      if (!by_variant.count(v)) {
        for (const char* peak : {"ps", "pd", "pas"}) {
          pearson_os << v << "," << peak << ",0,,,,missing-variant\n";
          ba_os << v << "," << peak << ",0,,,,,\n";
        }
        continue;
      }
      // slice-level peak pairs (pred, gt), pooled over folds
      std::map<std::pair<int, int>, std::array<double, 3>> pred, gt;
      std::set<std::pair<int, int>> ok_slices;
      for (const auto& f : by_variant.at(v))
        for (const auto& r : f.peaks) {
          const std::pair<int, int> key{r.subject, r.slice};
          if (r.source == "pred") {
            pred[key] = {r.ps, r.pd, r.pas};
            if (r.velocity_ok) ok_slices.insert(key);
          } else {
            gt[key] = {r.ps, r.pd, r.pas};
          }
        }
      const char* names[3] = {"ps", "pd", "pas"};
      for (int k = 0; k < 3; ++k) {
        std::vector<double> xs, ys;
        for (const auto& key : ok_slices)
          if (pred.count(key) && gt.count(key)) {
            xs.push_back(pred[key][std::size_t(k)]);
            ys.push_back(gt[key][std::size_t(k)]);
          }
        try {
          auto r = pearson(xs, ys);
          pearson_os << v << "," << names[k] << "," << r.n << "," << rd::fmt10(r.r) << "," << rd::fmt10(r.p) << ","
                     << int(r.p < alpha) << ",ok\n";
        } catch (const std::exception&) {
          pearson_os << v << "," << names[k] << "," << xs.size() << ",,,,degenerate\n";
        }
        try {
          auto ba = bland_altman(xs, ys);
          ba_os << v << "," << names[k] << "," << ba.n << "," << rd::fmt10(ba.mean_diff) << "," << rd::fmt10(ba.loa_low)
                << "," << rd::fmt10(ba.loa_high) << "," << ba.outliers.size() << ","
                << rd::fmt10(double(ba.outliers.size()) / double(ba.n)) << "\n";
          auto pts = rd::open_out(report_dir + "/bland_altman_" + v + "_" + names[k] + ".csv");
          pts << "mean,diff\n";
          for (const auto& [m, d] : ba.points) pts << rd::fmt(m) << "," << rd::fmt(d) << "\n";
        } catch (const std::exception&) {
          ba_os << v << "," << names[k] << "," << xs.size() << ",,,,,\n";
        }
      }
    }
  }
}

/// Study archive + JSON sidecar (ground-truth geometry, curve, config
/// echo), the on-disk form of one phantom acquisition.
inline void save_study(const std::string& dir, const CineStudy& st, const PhantomConfig& cfg) {
  std::filesystem::create_directories(dir);
  const std::string tag = "subject" + std::to_string(st.subject_id) + "_slice" + std::to_string(st.slice_id);
  NamedRecords recs;
  recs.push_back({"magnitude", to_record(st.magnitude)});
  recs.push_back({"phase", to_record(st.phase)});
  recs.push_back({"gt_mask", to_record(st.gt_mask)});
  write_archive(dir + "/" + tag + ".mvmt", recs);

  json j;
  j["subject_id"] = st.subject_id;
  j["slice_id"] = st.slice_id;
  j["frames"] = st.frames;
  j["size"] = st.size;
  j["venc"] = st.venc;
  j["lobes"] = json::array();
  for (int k = 0; k < 3; ++k) j["lobes"].push_back({st.lobes[k].amp, st.lobes[k].mu, st.lobes[k].sigma});
  j["gt_curve"] = st.gt_curve;
  j["gt_contours"] = json::array();
  for (const auto& [epi, endo] : st.gt_contours) {
    auto ej = [](const Ellipse& e) { return json{{"cx", e.cx}, {"cy", e.cy}, {"a", e.a}, {"b", e.b}, {"theta", e.theta}}; };
    j["gt_contours"].push_back(json{{"epi", ej(epi)}, {"endo", ej(endo)}});
  }
  j["config"] = config_json::to_json(cfg);
  auto os = report_detail::open_out(dir + "/" + tag + ".json");
  os << j.dump(2) << "\n";
}

struct ExperimentResult {
  std::map<std::string, std::vector<FoldEval>> evals;
};

/// Full experiment: dataset synthesis, cross-validated training of the
/// requested variants, evaluation, per-fold artifacts, and the final
/// cross-variant report (always regenerated from the saved artifacts so a
/// later `report` run over the same directory reproduces it byte for byte).
inline ExperimentResult run_experiment(const RunConfig& run, const std::vector<Variant>& variants) {
  run.validate();
  namespace rd = report_detail;
  const std::string out = run.output_dir;
  std::filesystem::create_directories(out);
  {
    auto os = rd::open_out(out + "/config.json");
    os << config_json::to_json(run).dump(2) << "\n";
  }
  Dataset data = build_dataset(run.phantom);
  FoldSplit split = kfold_split(data.subject_ids(), run.folds, run.seed);

  ExperimentResult result;
  std::map<std::string, std::vector<LoadedFold>> loaded;
  for (Variant v : variants) {
    for (int fold = 0; fold < run.folds; ++fold) {
      const std::string dir = out + "/" + to_string(v) + "/fold" + std::to_string(fold);
      TrainResult tr = train_fold(run, v, data, split, fold, dir);
      {
        auto os = rd::open_out(dir + "/train_log.csv");
        os << "epoch,mean_loss,val_dice\n";
        for (const auto& l : tr.log) os << l.epoch << "," << rd::fmt(l.mean_loss) << "," << rd::fmt(l.val_dice) << "\n";
      }
      FoldEval ev = evaluate_fold(tr.model, data, split.val[std::size_t(fold)], run.training.batch_size);
      ev.fold = fold;
      write_fold_artifacts(dir, ev);
      loaded[to_string(v)].push_back(load_fold_artifacts(dir));
      result.evals[to_string(v)].push_back(std::move(ev));
    }
  }
  write_report(out + "/report", loaded);
  return result;
}

inline CineStudy load_study(const std::string& dir, int subject_id, int slice_id) {
  const std::string tag = "subject" + std::to_string(subject_id) + "_slice" + std::to_string(slice_id);
  std::ifstream side(dir + "/" + tag + ".json");
  if (!side) throw std::runtime_error("load_study: missing sidecar for " + tag);
  json j = json::parse(side);
  CineStudy st;
  st.subject_id = j.at("subject_id").get<int>();
  st.slice_id = j.at("slice_id").get<int>();
  st.frames = j.at("frames").get<int>();
  st.size = j.at("size").get<int>();
  st.venc = j.at("venc").get<double>();
  for (int k = 0; k < 3; ++k) {
    const auto& l = j.at("lobes").at(std::size_t(k));
    st.lobes[k] = {l.at(0).get<double>(), l.at(1).get<double>(), l.at(2).get<double>()};
  }
  st.gt_curve = j.at("gt_curve").get<std::vector<double>>();
  for (const auto& c : j.at("gt_contours")) {
    auto pe = [](const json& e) {
      return Ellipse{e.at("cx").get<double>(), e.at("cy").get<double>(), e.at("a").get<double>(), e.at("b").get<double>(),
                     e.at("theta").get<double>()};
    };
    st.gt_contours.push_back({pe(c.at("epi")), pe(c.at("endo"))});
  }
  auto recs = read_archive(dir + "/" + tag + ".mvmt");
  for (const auto& [name, rec] : recs) {
    if (name == "magnitude") st.magnitude = record_to_tensor(rec);
    if (name == "phase") st.phase = record_to_tensor(rec);
    if (name == "gt_mask") st.gt_mask = record_to_masks(rec);
  }
  if (!st.magnitude.defined() || !st.phase.defined() || st.gt_mask.empty())
    throw std::runtime_error("load_study: incomplete archive for " + tag);
  return st;
}

}  // namespace mvmseg
