#include <hdf5.h>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "nowcast/data.hpp"

namespace nowcast {

namespace {

struct H5Handle {
  hid_t id = H5I_INVALID_HID;
  herr_t (*closer)(hid_t) = nullptr;
  H5Handle(hid_t id_, herr_t (*closer_)(hid_t)) : id(id_), closer(closer_) {}
  ~H5Handle() {
    if (id >= 0 && closer) closer(id);
  }
  H5Handle(const H5Handle&) = delete;
  H5Handle& operator=(const H5Handle&) = delete;
  bool ok() const { return id >= 0; }
};

void silence_hdf5_errors() {
  static const bool once = [] {
    H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
    return true;
  }();
  (void)once;
}

std::vector<double> read_1d(hid_t file, const std::string& path) {
  H5Handle ds(H5Dopen2(file, path.c_str(), H5P_DEFAULT), H5Dclose);
  if (!ds.ok()) return {};
  H5Handle space(H5Dget_space(ds.id), H5Sclose);
  hssize_t n = H5Sget_simple_extent_npoints(space.id);
  if (n <= 0) return {};
  std::vector<double> out(static_cast<std::size_t>(n));
  if (H5Dread(ds.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, out.data()) < 0) return {};
  return out;
}

// Creates intermediate groups for a path like "Grid/precipitation".
hid_t require_parent_groups(hid_t file, const std::string& dataset_path, std::string& leaf) {
  hid_t current = file;
  std::vector<hid_t> opened;
  std::size_t begin = 0;
  while (true) {
    auto slash = dataset_path.find('/', begin);
    if (slash == std::string::npos) {
      leaf = dataset_path.substr(begin);
      return current;
    }
    std::string group = dataset_path.substr(begin, slash - begin);
    hid_t next = H5Gopen2(current, group.c_str(), H5P_DEFAULT);
    if (next < 0) next = H5Gcreate2(current, group.c_str(), H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT);
    if (next < 0) throw std::runtime_error("write_granule: cannot create group " + group);
    current = next;  // leaked into the file handle's lifetime; closed by HDF5 at file close
    begin = slash + 1;
  }
}

}  // namespace

RainField read_granule(const std::filesystem::path& path, const GranuleLayout& layout) {
  silence_hdf5_errors();
  if (!std::filesystem::exists(path))
    throw std::runtime_error("read_granule: no such file: " + path.string());
  H5Handle file(H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT), H5Fclose);
  if (!file.ok()) throw std::runtime_error("read_granule: not an HDF5 file: " + path.string());

  H5Handle ds(H5Dopen2(file.id, layout.precipitation_path.c_str(), H5P_DEFAULT), H5Dclose);
  if (!ds.ok())
    throw std::runtime_error("read_granule: missing dataset '" + layout.precipitation_path +
                             "' in " + path.string());
  H5Handle space(H5Dget_space(ds.id), H5Sclose);
  int rank = H5Sget_simple_extent_ndims(space.id);
  hsize_t dims[3] = {1, 1, 1};
  H5Sget_simple_extent_dims(space.id, dims, nullptr);

  std::int64_t d0, d1;
  if (rank == 2) {
    d0 = static_cast<std::int64_t>(dims[0]);
    d1 = static_cast<std::int64_t>(dims[1]);
  } else if (rank == 3 && dims[0] == 1) {
    d0 = static_cast<std::int64_t>(dims[1]);
    d1 = static_cast<std::int64_t>(dims[2]);
  } else {
    throw std::runtime_error("read_granule: unsupported dataset rank in " + path.string());
  }

  auto raw = torch::empty({d0, d1}, torch::kFloat32);
  if (H5Dread(ds.id, H5T_NATIVE_FLOAT, H5S_ALL, H5S_ALL, H5P_DEFAULT, raw.data_ptr<float>()) < 0)
    throw std::runtime_error("read_granule: read failed for " + path.string());

  RainField field;
  // IMERG stores the grid (lon, lat); we hold (lat, lon) = (H, W).
  field.values = layout.transpose ? raw.t().contiguous() : raw;
  field.values = torch::where(field.values < 0.0f, torch::zeros_like(field.values), field.values);
  if (!torch::isfinite(field.values).all().item<bool>())
    throw std::runtime_error("read_granule: non-finite values after sentinel replacement in " +
                             path.string());

  auto times = read_1d(file.id, layout.time_path);
  if (times.empty())
    throw std::runtime_error("read_granule: missing dataset '" + layout.time_path + "' in " +
                             path.string());
  field.timestamp = static_cast<std::int64_t>(times.front());

  auto lat = read_1d(file.id, layout.lat_path);
  auto lon = read_1d(file.id, layout.lon_path);
  if (!lat.empty() && !lon.empty()) {
    field.bbox.lat_min = std::min(lat.front(), lat.back());
    field.bbox.lat_max = std::max(lat.front(), lat.back());
    field.bbox.lon_min = std::min(lon.front(), lon.back());
    field.bbox.lon_max = std::max(lon.front(), lon.back());
  }
  return field;
}

void write_granule(const std::filesystem::path& path, const RainField& field,
                   const GranuleLayout& layout) {
  silence_hdf5_errors();
  if (field.values.dim() != 2) throw std::invalid_argument("write_granule: values must be 2-D");
  H5Handle file(H5Fcreate(path.c_str(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT), H5Fclose);
  if (!file.ok()) throw std::runtime_error("write_granule: cannot create " + path.string());

  auto stored = layout.transpose ? field.values.t().contiguous() : field.values.contiguous();
  stored = stored.to(torch::kFloat32);
  hsize_t dims[2] = {static_cast<hsize_t>(stored.size(0)), static_cast<hsize_t>(stored.size(1))};

  std::string leaf;
  hid_t parent = require_parent_groups(file.id, layout.precipitation_path, leaf);
  {
    H5Handle space(H5Screate_simple(2, dims, nullptr), H5Sclose);
    H5Handle ds(H5Dcreate2(parent, leaf.c_str(), H5T_NATIVE_FLOAT, space.id, H5P_DEFAULT,
                           H5P_DEFAULT, H5P_DEFAULT),
                H5Dclose);
    if (!ds.ok()) throw std::runtime_error("write_granule: cannot create dataset");
    H5Dwrite(ds.id, H5T_NATIVE_FLOAT, H5S_ALL, H5S_ALL, H5P_DEFAULT, stored.data_ptr<float>());
  }

  auto write_1d = [&](const std::string& full_path, const std::vector<double>& values) {
    std::string leaf1;
    hid_t p = require_parent_groups(file.id, full_path, leaf1);
    hsize_t n = values.size();
    H5Handle space(H5Screate_simple(1, &n, nullptr), H5Sclose);
    H5Handle ds(H5Dcreate2(p, leaf1.c_str(), H5T_NATIVE_DOUBLE, space.id, H5P_DEFAULT, H5P_DEFAULT,
                           H5P_DEFAULT),
                H5Dclose);
    if (!ds.ok()) throw std::runtime_error("write_granule: cannot create dataset " + full_path);
    H5Dwrite(ds.id, H5T_NATIVE_DOUBLE, H5S_ALL, H5S_ALL, H5P_DEFAULT, values.data());
  };

  const auto h = field.values.size(0), w = field.values.size(1);
  std::vector<double> lat(h), lon(w);
  for (std::int64_t i = 0; i < h; ++i)
    lat[i] = field.bbox.lat_min +
             (h > 1 ? (field.bbox.lat_max - field.bbox.lat_min) * double(i) / double(h - 1) : 0.0);
  for (std::int64_t i = 0; i < w; ++i)
    lon[i] = field.bbox.lon_min +
             (w > 1 ? (field.bbox.lon_max - field.bbox.lon_min) * double(i) / double(w - 1) : 0.0);
  write_1d(layout.lat_path, lat);
  write_1d(layout.lon_path, lon);
  write_1d(layout.time_path, {static_cast<double>(field.timestamp)});
}

}  // namespace nowcast
