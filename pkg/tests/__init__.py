"""Test suite for Job Application Tracking Agent"""
