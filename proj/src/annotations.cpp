#include "congeal/annotations.hpp"

#include <fstream>

#include <json.hpp>

#include "congeal/common.hpp"

namespace congeal {

using nlohmann::json;

namespace {

torch::Tensor points_from_json(const json& arr, const std::string& what) {
  std::vector<float> flat;
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() != 2)
      throw SchemaError("annotation " + what + ": keypoints must be [x,y] pairs");
    flat.push_back(p[0].get<float>());
    flat.push_back(p[1].get<float>());
  }
  return torch::tensor(flat).view({-1, 2});
}

}  // namespace

KeypointAnnotations load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("bad annotations file: ") + e.what());
  }

  KeypointAnnotations ann;
  if (j.contains("threshold_mode"))
    ann.threshold_mode = j.at("threshold_mode").get<std::string>();
  if (ann.threshold_mode != "bbox" && ann.threshold_mode != "image")
    throw SchemaError("threshold_mode must be 'bbox' or 'image'");

  for (const auto& p : j.at("pairs")) {
    KeypointPair pair;
    pair.source = p.at("source").get<std::string>();
    pair.target = p.at("target").get<std::string>();
    pair.src_points = points_from_json(p.at("src_keypoints"),
                                       pair.source + "->" + pair.target);
    pair.tgt_points = points_from_json(p.at("tgt_keypoints"),
                                       pair.source + "->" + pair.target);
    if (pair.src_points.size(0) != pair.tgt_points.size(0))
      throw SchemaError("pair " + pair.source + "->" + pair.target +
                        ": keypoint lists differ in length");
    if (p.contains("bbox")) {
      auto b = p.at("bbox");
      pair.bbox = std::array<double, 4>{b[0].get<double>(), b[1].get<double>(),
                                        b[2].get<double>(), b[3].get<double>()};
    }
    ann.pairs.push_back(std::move(pair));
  }
  if (ann.threshold_mode == "bbox")
    for (const auto& p : ann.pairs)
      if (!p.bbox)
        throw SchemaError("threshold_mode=bbox but pair " + p.source + "->" +
                          p.target + " has no bbox");
  return ann;
}

void save_annotations(const KeypointAnnotations& ann, const std::string& path) {
  json j;
  j["threshold_mode"] = ann.threshold_mode;
  j["pairs"] = json::array();
  for (const auto& p : ann.pairs) {
    json jp;
    jp["source"] = p.source;
    jp["target"] = p.target;
    auto dump_pts = [](const torch::Tensor& t) {
      json arr = json::array();
      auto a = t.accessor<float, 2>();
      for (int64_t i = 0; i < t.size(0); ++i)
        arr.push_back({a[i][0], a[i][1]});
      return arr;
    };
    jp["src_keypoints"] = dump_pts(p.src_points);
    jp["tgt_keypoints"] = dump_pts(p.tgt_points);
    if (p.bbox) jp["bbox"] = {(*p.bbox)[0], (*p.bbox)[1], (*p.bbox)[2], (*p.bbox)[3]};
    j["pairs"].push_back(jp);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write annotations: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace congeal
