"""External energy meter ingestion: seven-segment OCR and cumulative timelines."""

from .ocr import (
    DisplayLayout,
    DigitDecode,
    LowContrastWarning,
    MeterFrame,
    PixelForestDecoder,
    SegmentDecoder,
    decode_digit,
    decode_pattern,
    read_frame,
    render_display,
    segment_display,
    synthetic_digit_corpus,
)
from .timeline import (
    CoverageError,
    TimelineError,
    build_timeline,
    ground_truth_energy,
    load_frames,
    read_frames,
    read_reading_file,
    write_frames,
    write_reading_file,
)
