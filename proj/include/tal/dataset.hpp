#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tal/image.hpp"

namespace tal {

enum class Split { kTrain, kQuery, kGallery };

struct ReidRecord {
  std::string path;  // empty for purely in-memory records
  Image pixels;      // may be empty until load_pixels
  int id = 0;        // dense within the dataset
  int raw_id = 0;    // as parsed from the source
  int camera = 0;
  int domain = 0;    // 1..K; 0 = unassigned/hybrid
};

struct ReidDataset {
  Split split = Split::kTrain;
  std::vector<ReidRecord> records;
  int num_ids = 0;
  std::vector<std::vector<int>> by_id;  // dense id -> record indices

  void build_index() {
    by_id.assign(static_cast<std::size_t>(num_ids), {});
    for (std::size_t i = 0; i < records.size(); ++i)
      by_id[static_cast<std::size_t>(records[i].id)].push_back(static_cast<int>(i));
  }

  void remap_ids_dense() {
    std::map<int, int> remap;
    for (const auto& r : records) remap.emplace(r.raw_id, 0);
    int next = 0;
    for (auto& [raw, dense] : remap) dense = next++;
    for (auto& r : records) r.id = remap[r.raw_id];
    num_ids = next;
    build_index();
  }
};

// market-style filename grammar: id_cCsS_frame_box.jpg, e.g.
// 0002_c1s1_000451_03.jpg -> identity 2, camera 1. Negative ids (junk boxes)
// are skipped by the loader.
inline bool parse_market_name(const std::string& name, int& id, int& camera) {
  std::size_t us = name.find('_');
  if (us == std::string::npos || us == 0) return false;
  try {
    std::size_t used = 0;
    id = std::stoi(name.substr(0, us), &used);
    if (used != us) return false;
  } catch (...) {
    return false;
  }
  if (us + 1 >= name.size() || name[us + 1] != 'c') return false;
  std::size_t pos = us + 2, end = pos;
  while (end < name.size() && std::isdigit(static_cast<unsigned char>(name[end]))) ++end;
  if (end == pos) return false;
  camera = std::stoi(name.substr(pos, end - pos));
  return true;
}

inline std::string market_name(int id, int camera, int frame, int box = 0,
                               const std::string& ext = ".jpg") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d_c%ds1_%06d_%02d%s", id, camera, frame, box, ext.c_str());
  return buf;
}

inline bool is_image_file(const std::string& name) {
  return ends_with(name, ".jpg") || ends_with(name, ".jpeg") || ends_with(name, ".ppm");
}

enum class Layout { kMarket, kCsv };

inline Layout parse_layout(const std::string& s) {
  if (s == "market") return Layout::kMarket;
  if (s == "csv") return Layout::kCsv;
  throw ConfigError("unknown data layout: " + s);
}

// Loads a directory of market-style files or a simple CSV
// (path,identity,camera,domain). Identity ids are remapped densely; camera
// ids are preserved for the evaluation exclusion rule. camera_as_domain
// reassigns domain := camera for camera-as-domain protocols.
inline ReidDataset load_dataset(const std::string& root, Layout layout, Split split,
                                int domain = 0, bool camera_as_domain = false) {
  namespace fs = std::filesystem;
  ReidDataset ds;
  ds.split = split;
  if (layout == Layout::kMarket) {
    check_data(fs::is_directory(root), "not a directory: " + root);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_regular_file() && is_image_file(e.path().filename().string()))
        names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      int id = 0, cam = 0;
      check_data(parse_market_name(name, id, cam), "unparseable market filename: " + name);
      if (id < 0) continue;  // junk/distractor boxes
      ReidRecord r;
      r.path = (fs::path(root) / name).string();
      r.raw_id = id;
      r.camera = cam;
      r.domain = camera_as_domain ? cam : domain;
      ds.records.push_back(std::move(r));
    }
  } else {
    std::ifstream is(root);
    check_data(is.good(), "cannot open csv: " + root);
    const fs::path base = fs::path(root).parent_path();
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (first && line.rfind("path,", 0) == 0) {
        first = false;
        continue;  // header
      }
      first = false;
      std::stringstream ss(line);
      std::string path, ids, cams, doms;
      check_data(std::getline(ss, path, ',') && std::getline(ss, ids, ',') &&
                     std::getline(ss, cams, ',') && std::getline(ss, doms, ','),
                 "bad csv row: " + line);
      ReidRecord r;
      r.path = fs::path(path).is_absolute() ? path : (base / path).string();
      try {
        r.raw_id = std::stoi(ids);
        r.camera = std::stoi(cams);
        r.domain = std::stoi(doms);
      } catch (...) {
        throw DataError("bad csv row: " + line);
      }
      if (camera_as_domain) r.domain = r.camera;
      if (domain != 0) r.domain = domain;
      ds.records.push_back(std::move(r));
    }
  }
  check_data(!ds.records.empty(), "empty dataset: " + root);
  ds.remap_ids_dense();
  return ds;
}

inline void load_pixels(ReidDataset& ds) {
  for (auto& r : ds.records)
    if (r.pixels.px.empty()) {
      check_data(!r.path.empty(), "record has neither pixels nor a path");
      r.pixels = read_image(r.path);
    }
}

// Union of the source-domain training sets with identity ids offset so they
// stay disjoint. Domain ids are retained for bookkeeping only; the hybrid
// training phases never consult them.
inline ReidDataset hybrid_view(const std::vector<ReidDataset>& sets) {
  check_arg(!sets.empty(), "hybrid view needs at least one dataset");
  ReidDataset out;
  out.split = Split::kTrain;
  int offset = 0;
  for (const auto& ds : sets) {
    for (auto r : ds.records) {
      r.id += offset;
      out.records.push_back(std::move(r));
    }
    offset += ds.num_ids;
  }
  out.num_ids = offset;
  out.build_index();
  return out;
}

}  // namespace tal
