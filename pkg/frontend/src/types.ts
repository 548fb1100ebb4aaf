// Payload types for the /api/v1/ review endpoints.

export interface RleMask {
  width: number;
  height: number;
  counts: number[];
}

export interface SequenceInfo {
  id: string;
  frame_count: number;
  cameras: string[];
}

export interface MaskEntry {
  masklet_id: number;
  rle: RleMask;
  score: number | null;
  no_score: boolean;
  verdict: string | null;
}

export interface CameraBundle {
  width: number;
  height: number;
  masks: MaskEntry[];
}

export interface BevGroup {
  masklet_id: number;
  points: [number, number][];
}

export interface FrameBundle {
  version: number;
  frame: number;
  cameras: Record<string, CameraBundle>;
  lidar: { count: number; masklets: { masklet_id: number; indices: number[] }[] };
  bev: BevGroup[];
}

export interface MaskletSummary {
  masklet_id: number;
  voxel_count: number;
  score: number | null;
  no_score: boolean;
  objects: number[];
  cameras: string[];
  verdict: string | null;
}

export type ParameterName =
  | "eps"
  | "min_pts"
  | "vote_rate_threshold"
  | "overlap_threshold"
  | "transfer_radius_voxels";

export type Parameters = Record<ParameterName, number>;

export type ParameterBounds = Record<ParameterName, { min: number; max: number }>;

export const PARAMETER_NAMES: ParameterName[] = [
  "eps",
  "min_pts",
  "vote_rate_threshold",
  "overlap_threshold",
  "transfer_radius_voxels",
];
