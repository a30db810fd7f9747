#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coslin/error.hpp"

namespace coslin {

/// Proleptic Gregorian calendar date with day arithmetic.
struct Date {
    int year = 1970;
    int month = 1;
    int day = 1;

    auto operator<=>(const Date&) const = default;

    bool valid() const;
    /// Days since 1970-01-01.
    long long serial() const;
    static Date from_serial(long long days);
    Date next() const { return from_serial(serial() + 1); }
    Date prev() const { return from_serial(serial() - 1); }

    static std::optional<Date> parse(const std::string& iso); // "YYYY-MM-DD"
    std::string to_string() const;
};

enum class Pollutant { Pm25, Pm10, No2, O3, So2, Co };

inline constexpr std::array<Pollutant, 6> kAllPollutants = {
    Pollutant::Pm25, Pollutant::Pm10, Pollutant::No2,
    Pollutant::O3,   Pollutant::So2,  Pollutant::Co,
};

const char* pollutant_name(Pollutant p);    // "pm25", ...
const char* pollutant_column(Pollutant p);  // "pm25_med", ...
std::optional<Pollutant> parse_pollutant(const std::string& name);

/// Daily input features, in samples.csv column order; the power-plant
/// feature is computed from plants.csv + cities.csv rather than parsed.
inline constexpr std::size_t kRawFeatureCount = 8;
inline constexpr std::size_t kFeatureCount = 9;
inline constexpr std::size_t kPowerPlantFeature = 8;
inline constexpr std::array<const char*, kFeatureCount> kFeatureNames = {
    "pop_home", "traffic_mmiles", "pressure",  "humidity",   "temperature",
    "dew",      "wind_gust",      "wind_speed", "power_plant",
};

/// One (city, date) observation. Absent cells stay absent (never zero).
struct SampleRecord {
    std::string city;
    Date date;
    std::array<std::optional<double>, 6> targets;              // indexed by Pollutant
    std::array<std::optional<double>, kFeatureCount> features; // indexed per kFeatureNames
};

enum class FuelType { Coal, Oil, Gas, Biomass };
const char* fuel_name(FuelType f);
std::optional<FuelType> parse_fuel(const std::string& name);

struct PowerPlant {
    std::string id;
    double lat = 0.0;
    double lon = 0.0;
    FuelType fuel = FuelType::Gas;
    /// (year, month) -> average daily generating capacity for that month.
    std::map<std::pair<int, int>, double> monthly_gen;
};

struct CityMeta {
    std::string city;
    double lat = 0.0;
    double lon = 0.0;
};

/// A seq_len-day stretch of feature rows plus the previous-day pollutant
/// column, with the final day's pollutant value as target.
struct SeriesWindow {
    std::string city;
    Pollutant pollutant = Pollutant::Pm25;
    std::size_t seq_len = 0;
    std::size_t n_features = 0;                // kFeatureCount + 1
    std::vector<double> features;              // seq_len x n_features, row-major
    double target = 0.0;
    Date end_date;

    double at(std::size_t row, std::size_t col) const { return features[row * n_features + col]; }
};

// ---- CSV schemas (UTF-8, comma-delimited, '.' decimal, blank = missing) ---

extern const char* const kSamplesHeader;  // city,date,pm25_med,...,wind_speed
extern const char* const kPlantsHeader;   // plant_id,lat,lon,fuel,year,month,gen_daily_avg
extern const char* const kCitiesHeader;   // city,lat,lon

/// Parses samples.csv. One record per (city, date); duplicates are an error,
/// malformed rows report their line number.
std::vector<SampleRecord> parse_records(std::istream& in);
void write_records(std::ostream& out, const std::vector<SampleRecord>& records);

std::map<std::string, CityMeta> parse_cities(std::istream& in);
std::vector<PowerPlant> parse_plants(std::istream& in);

/// Great-circle distance, Earth radius 6371.0 km.
double haversine_km(double lat1, double lon1, double lat2, double lon2);

/// Inverse-square emission feature: sum of G_p / r_cp^2 over plants strictly
/// within 30 km of the city center. A plant without that month's generation
/// contributes 0; the monthly value is reused for every day of the month.
double power_plant_feature(const CityMeta& city, const std::vector<PowerPlant>& plants,
                           int year, int month);

inline constexpr double kPowerPlantRadiusKm = 30.0;

/// Fills the power-plant feature column of every record.
void attach_power_plant_feature(std::vector<SampleRecord>& records,
                                const std::map<std::string, CityMeta>& cities,
                                const std::vector<PowerPlant>& plants);

// ---- split protocol --------------------------------------------------------

/// Held-out evaluation segment: 60 consecutive days per city.
inline constexpr Date kTestStart{2020, 3, 1};
inline constexpr Date kTestEnd{2020, 4, 29};
bool in_test_range(const Date& d);

/// Per city: days inside [kTestStart, kTestEnd] are test, the rest train.
std::pair<std::vector<SampleRecord>, std::vector<SampleRecord>> split_train_test(
    const std::vector<SampleRecord>& records);

/// Forward-fills features within each city, then fills what remains (leading
/// gaps) with the city's training-period median. Targets are never imputed.
/// Records are returned sorted by (city, date).
std::vector<SampleRecord> impute(std::vector<SampleRecord> records);

/// Sliding windows over consecutive calendar days. Each row carries the
/// day's 9 features plus the most recent observed pollutant value from
/// before that day; the target is the final day's observed value. Windows
/// with a calendar gap, a missing feature, an unresolvable previous-day
/// value, or a missing target are skipped.
std::vector<SeriesWindow> build_windows(const std::vector<SampleRecord>& records,
                                        Pollutant pollutant, int seq_len);

struct WindowSplit {
    std::vector<SeriesWindow> train;
    std::vector<SeriesWindow> test;
};

/// Test windows end inside the test range; train windows touch no test-range
/// day at all (boundary-straddling windows are dropped to prevent leakage).
WindowSplit split_windows(const std::vector<SeriesWindow>& windows);

struct Quartiles {
    double q25 = 0.0;
    double q50 = 0.0;
    double q75 = 0.0;
};

/// 25/50/75th percentiles (linear interpolation) of a named column; `field`
/// is a pollutant column ("pm25_med") or feature name ("traffic_mmiles",
/// "power_plant"). Skips absent cells; errors when nothing is observed.
Quartiles summarize_distribution(const std::vector<SampleRecord>& records,
                                 const std::string& field);

} // namespace coslin
