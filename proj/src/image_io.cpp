#include "congeal/image_io.hpp"

#include <algorithm>
#include <filesystem>
#include <future>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "congeal/common.hpp"

namespace congeal {

namespace fs = std::filesystem;

torch::Tensor PadInfo::to_working(const torch::Tensor& pts) const {
  const double s = static_cast<double>(target) / static_cast<double>(padded);
  auto pad = torch::tensor({static_cast<double>(pad_left),
                            static_cast<double>(pad_top)},
                           pts.options().dtype(torch::kFloat64));
  return ((pts.to(torch::kFloat64) + pad) * s).to(pts.scalar_type());
}

torch::Tensor PadInfo::to_original(const torch::Tensor& pts) const {
  const double s = static_cast<double>(padded) / static_cast<double>(target);
  auto pad = torch::tensor({static_cast<double>(pad_left),
                            static_cast<double>(pad_top)},
                           pts.options().dtype(torch::kFloat64));
  return (pts.to(torch::kFloat64) * s - pad).to(pts.scalar_type());
}

torch::Tensor read_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("unreadable image: " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
               .clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
}

void write_image(const std::string& path, const torch::Tensor& image) {
  auto img = image.detach().to(torch::kFloat32).clamp(0, 1);
  if (img.dim() == 2) img = img.unsqueeze(0);
  auto u8 = (img * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  cv::Mat mat(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)),
              u8.size(2) == 1 ? CV_8UC1 : CV_8UC3, u8.data_ptr<uint8_t>());
  cv::Mat out;
  if (u8.size(2) == 3)
    cv::cvtColor(mat, out, cv::COLOR_RGB2BGR);
  else
    out = mat;
  fs::create_directories(fs::path(path).parent_path());
  if (!cv::imwrite(path, out)) throw IoError("cannot write image: " + path);
}

std::pair<torch::Tensor, PadInfo> preprocess_image(const torch::Tensor& rgb,
                                                   int64_t target_size,
                                                   const std::string& pad_mode) {
  check(rgb.dim() == 3 && rgb.size(0) == 3, "expected [3,H,W] image");
  const int64_t h = rgb.size(1), w = rgb.size(2);
  const int64_t side = std::max(h, w);

  PadInfo info;
  info.orig_w = w;
  info.orig_h = h;
  info.padded = side;
  info.target = target_size;
  info.pad_left = (side - w) / 2;
  info.pad_top = (side - h) / 2;

  torch::Tensor padded = rgb;
  if (h != w) {
    const int64_t pr = side - w - info.pad_left;
    const int64_t pb = side - h - info.pad_top;
    auto opts = torch::nn::functional::PadFuncOptions(
        {info.pad_left, pr, info.pad_top, pb});
    if (pad_mode == "zero")
      opts = opts.mode(torch::kConstant);
    else
      opts = opts.mode(torch::kReplicate);
    padded = torch::nn::functional::pad(rgb.unsqueeze(0), opts).squeeze(0);
  }
  if (side != target_size) {
    cv::Mat src(static_cast<int>(side), static_cast<int>(side), CV_32FC3);
    auto hw3 = padded.permute({1, 2, 0}).contiguous();
    std::memcpy(src.data, hw3.data_ptr<float>(), sizeof(float) * side * side * 3);
    cv::Mat dst;
    const auto interp = side > target_size ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(src, dst, cv::Size(static_cast<int>(target_size),
                                  static_cast<int>(target_size)),
               0, 0, interp);
    padded = torch::from_blob(dst.data, {target_size, target_size, 3},
                              torch::kFloat32)
                 .clone()
                 .permute({2, 0, 1});
  }
  return {padded.contiguous(), info};
}

ImageSet load_image_set(const std::vector<std::string>& paths,
                        int64_t target_size, const std::string& pad_mode) {
  if (paths.size() < 2)
    throw ConfigError("an image set needs at least 2 images, got " +
                      std::to_string(paths.size()));

  std::vector<std::future<torch::Tensor>> jobs;
  jobs.reserve(paths.size());
  for (const auto& p : paths)
    jobs.push_back(std::async(std::launch::async, [p] { return read_image(p); }));

  std::vector<torch::Tensor> decoded(paths.size());
  std::vector<std::string> bad;
  for (size_t i = 0; i < paths.size(); ++i) {
    try {
      decoded[i] = jobs[i].get();
    } catch (const IoError&) {
      bad.push_back(paths[i]);
    }
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "unreadable image files:";
    for (const auto& p : bad) os << "\n  " << p;
    throw IoError(os.str());
  }

  ImageSet set;
  std::vector<torch::Tensor> imgs;
  for (size_t i = 0; i < paths.size(); ++i) {
    auto [img, info] = preprocess_image(decoded[i], target_size, pad_mode);
    imgs.push_back(img);
    set.pad_info.push_back(info);
    set.names.push_back(fs::path(paths[i]).stem().string());
  }
  set.images = torch::stack(imgs, 0);
  return set;
}

std::vector<std::string> list_images(const std::string& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
      out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace congeal
